"""Frozen "Output size" columns of the three published layer tables.

Each row is (entry name, channels, spatial extents); 3D extents are ordered
(depth, height, width). These are the expected values for shape-trace
conformance and are kept independent of the builder code.
"""

RAUNET1_ROWS = [
    ("Input", 1, (256, 256)),
    ("Conv1", 16, (256, 256)),
    ("Pool1", 16, (128, 128)),
    ("Res1", 16, (128, 128)),
    ("Pool2", 16, (64, 64)),
    ("Res2", 32, (64, 64)),
    ("Pool3", 32, (32, 32)),
    ("Res3", 64, (32, 32)),
    ("Pool4", 64, (16, 16)),
    ("Res4", 128, (16, 16)),
    ("Pool5", 128, (8, 8)),
    ("Res5", 256, (8, 8)),
    ("Res6", 256, (8, 8)),
    ("Up1", 256, (16, 16)),
    ("Att1", 128, (16, 16)),
    ("Res7", 128, (16, 16)),
    ("Up2", 128, (32, 32)),
    ("Att2", 64, (32, 32)),
    ("Res8", 64, (32, 32)),
    ("Up3", 64, (64, 64)),
    ("Att3", 32, (64, 64)),
    ("Res9", 32, (64, 64)),
    ("Up4", 32, (128, 128)),
    ("Att4", 16, (128, 128)),
    ("Res10", 16, (128, 128)),
    ("Up5", 16, (256, 256)),
    ("Conv2", 16, (256, 256)),
    ("Conv3", 1, (256, 256)),
]

RAUNET2_ROWS = [
    ("Input", 1, (32, 224, 224)),
    ("Conv1", 32, (32, 224, 224)),
    ("Pool1", 32, (16, 112, 112)),
    ("Res1", 32, (16, 112, 112)),
    ("Pool2", 32, (8, 56, 56)),
    ("Res2", 64, (8, 56, 56)),
    ("Pool3", 64, (4, 28, 28)),
    ("Res3", 128, (4, 28, 28)),
    ("Pool4", 128, (2, 14, 14)),
    ("Res4", 256, (2, 14, 14)),
    ("Pool5", 256, (1, 7, 7)),
    ("Res5", 512, (1, 7, 7)),
    ("Res6", 512, (1, 7, 7)),
    ("Up1", 512, (2, 14, 14)),
    ("Att1", 256, (2, 14, 14)),
    ("Res7", 256, (2, 14, 14)),
    ("Up2", 256, (4, 28, 28)),
    ("Att2", 128, (4, 28, 28)),
    ("Res8", 128, (4, 28, 28)),
    ("Up3", 128, (8, 56, 56)),
    ("Att3", 64, (8, 56, 56)),
    ("Res9", 64, (8, 56, 56)),
    ("Up4", 64, (16, 112, 112)),
    ("Att4", 32, (16, 112, 112)),
    ("Res10", 32, (16, 112, 112)),
    ("Up5", 32, (32, 224, 224)),
    ("Conv2", 32, (32, 224, 224)),
    ("Conv3", 1, (32, 224, 224)),
]

RAUNET_BRAIN_ROWS = [
    ("Input", 4, (64, 64, 64)),
    ("Conv1", 32, (64, 64, 64)),
    ("Pool1", 32, (32, 32, 32)),
    ("Res1", 64, (32, 32, 32)),
    ("Pool2", 64, (16, 16, 16)),
    ("Res2", 128, (16, 16, 16)),
    ("Pool3", 128, (8, 8, 8)),
    ("Res3", 256, (8, 8, 8)),
    ("Pool4", 256, (4, 4, 4)),
    ("Res4", 512, (4, 4, 4)),
    ("Pool5", 512, (2, 2, 2)),
    ("Res5", 512, (2, 2, 2)),
    ("Res6", 512, (2, 2, 2)),
    ("Up1", 512, (4, 4, 4)),
    ("Att1", 512, (4, 4, 4)),
    ("Res7", 512, (4, 4, 4)),
    ("Up2", 512, (8, 8, 8)),
    ("Att2", 256, (8, 8, 8)),
    ("Res8", 256, (8, 8, 8)),
    ("Up3", 256, (16, 16, 16)),
    ("Att3", 128, (16, 16, 16)),
    ("Res9", 128, (16, 16, 16)),
    ("Up4", 128, (32, 32, 32)),
    ("Att4", 64, (32, 32, 32)),
    ("Res10", 64, (32, 32, 32)),
    ("Up5", 64, (64, 64, 64)),
    ("Conv2", 32, (64, 64, 64)),
    ("Conv3", 1, (64, 64, 64)),
]

EXPECTED = {
    "raunet1": RAUNET1_ROWS,
    "raunet2": RAUNET2_ROWS,
    "raunet_brain": RAUNET_BRAIN_ROWS,
}
