"""Frozen regression values for the deterministic counterterm pipeline.

Regenerate with ``scripts/make_golden.py`` after an intentional numerical
change; the verify suite and the regression tests compare fresh
computations against these at tight relative tolerance.
"""

# populated by scripts/make_golden.py; keys are (d, level, rho)
RENORM_GOLDEN: dict = {
    (1, 2, 0.5): {"c_n": 0.19728344888433663, "c_n1": 0.0, "c_n22": 0.02642712608237738, "c_n23": -2.554357414007169e-05},
    (1, 3, 0.5): {"c_n": 0.19777164873444728, "c_n1": 0.0, "c_n22": 0.02641277465574788, "c_n23": -1.872925216981486e-05},
    (3, 2, 0.5): {"c_n": 0.28628121262140876, "c_n1": 0.0, "c_n22": 0.02671933200996275, "c_n23": -0.0001733308113190668},
    (3, 3, 0.5): {"c_n": 0.4121243506150559, "c_n1": 0.0, "c_n22": 0.02672146221755884, "c_n23": -0.00018138690519828998},
    (3, 3, 0.3): {"c_n": 0.346184454516647, "c_n1": 0.01008836623453773, "c_n22": 0.018854663740709515, "c_n23": -0.00012798660030791803},
}

GOLDEN_RTOL = 1e-9
