"""HandScaleFK library: skeleton, forward kinematics, fitting, data and evaluation."""
