"""
From a liquid mask to a landing point
=====================================

A synthetic scene gives us an RGB image, the true stream mask, the pose of
the pouring container and the gravity direction in the camera frame.  The
stream is assumed to stay inside the vertical plane through the container,
so every mask pixel can be lifted to 3-D by a single ray/plane intersection.
"""

import numpy as np

from pourcam import camseg, geom3d, synthgen

cfg = synthgen.SceneConfig.desk()
scene = synthgen.generate_scene(cfg, label=1, seed=3)
print("image", scene.image.shape, "stream pixels", int(scene.gt_mask.sum()))

# the pouring plane: normal is the container's lateral axis with gravity removed
plane = geom3d.pouring_plane(scene.pose, scene.gravity_cam)
print("plane normal", np.round(plane.normal, 4), " n.g =", float(plane.normal @ scene.gravity_cam))

# thin the mask first so each stream cross-section contributes one point
skel = camseg.skeletonize(scene.gt_mask)
print("skeleton keeps", int(skel.sum()), "of", int(scene.gt_mask.sum()), "pixels")

cloud = geom3d.liquid_point_cloud(scene.gt_mask, scene.pose, scene.intrinsics, scene.gravity_cam)
print("cloud", cloud.points.shape, "dropped", cloud.n_dropped)

# every point must lie on the plane and reproject onto its pixel
print("max plane residual", np.abs(plane.residual(cloud.points)).max())
print("max reprojection error", np.abs(geom3d.project(cloud.points, scene.intrinsics) - cloud.pixels).max())

# the landing point is the stream point furthest along gravity
depth = cloud.points @ scene.gravity_cam
landing = cloud.points[np.argmax(depth)]
print("landing point (m)", np.round(landing, 4))

# pretend the cup sits 3 cm beside the true landing point
target = landing + 0.03 * geom3d.unit(np.cross(scene.gravity_cam, plane.normal))
print("liquid-to-container distance", round(geom3d.liquid_to_container_distance(cloud, target, scene.gravity_cam), 4))

geom3d.write_ply("stream_cloud.ply", cloud.points)
