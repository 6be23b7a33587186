"""Published VGG-11 / CIFAR-100 figures kept as comparison constants for reports.

Nothing in the package asserts these; tests and reports compare against them.
"""

# layer -> (accuracy, N_c, C_s, diagonal, dilution); layer 11 is the FC output, layer 5 was not pruned
VGG11_AFCC_LAYERS = {
    11: (0.76, None, None, None, 0.95),
    10: (0.76, 1.53, 3.01, 4.61, 0.90),
    9: (0.76, 1.12, 2.19, 2.45, 0.90),
    8: (0.75, 2.17, 2.23, 4.83, 0.74),
    7: (0.71, 2.64, 2.58, 6.81, 0.64),
    6: (0.65, 3.54, 2.46, 8.71, 0.50),
    5: (0.60, 4.45, 2.58, 11.48, None),
}

# layer -> (accuracy, artificial cluster size, dilution)
VGG11_A_AFCC_LAYERS = {
    10: (0.76, 7, 0.93),
    9: (0.23, 8, 0.55),
    8: (0.31, 9, 0.46),
    7: (0.21, 10, 0.37),
    6: (0.19, 11, 0.29),
    5: (0.45, 12, 0.23),
}

VGG11_DENSE_GMACS = 0.286
VGG11_AFCC_GMACS = 0.197
VGG11_A_AFCC_GMACS = 0.222
FC_NODE_DENSE_WEIGHTS = 4096 * 4096
FC_NODE_PRUNED_WEIGHTS = 167_000
