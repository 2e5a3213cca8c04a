# Render a handle-like cylinder, lift the masked depth to 3D, propose a grasp.
import numpy as np

from affordkit.graspgen import GripperSpec, propose_grasp
from affordkit.projection import DepthImage, backproject_masked
from affordkit.synthetic import render_cylinder_scene

scene = render_cylinder_scene(radius=0.015, length=0.2, camera_height=0.4)
print("mask pixels:", scene.mask.area())

cloud = backproject_masked(scene.mask, DepthImage.from_array(scene.depth), scene.K, scene.T)
print("points:", len(cloud))

gripper = GripperSpec(max_width=0.085, finger_margin=0.005)
pose = propose_grasp(cloud, scene.K, scene.T, gripper)

np.set_printoptions(precision=4, suppress=True)
print("position ", pose.position)
print("approach ", pose.approach)   # camera ray through the centroid
print("closing  ", pose.closing)    # across the cylinder
print("width mm ", round(pose.width * 1000, 2))  # about 30 + 2 * 5
print("score    ", pose.score)
