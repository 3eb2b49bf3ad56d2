import numpy as np
import pytest


def conv1d_loop(x, w, b=None, stride=1, dilation=1, groups=1, padding=(0, 0)):
    """Direct nested-loop convolution, the reference for every conv test."""
    if isinstance(padding, int):
        padding = (padding, padding)
    B, C, T = x.shape
    F, Cg, K = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), padding))
    Tp = xp.shape[2]
    T_out = (Tp - dilation * (K - 1) - 1) // stride + 1
    out = np.zeros((B, F, T_out))
    fg = F // groups
    for bi in range(B):
        for f in range(F):
            g = f // fg
            for t in range(T_out):
                acc = 0.0
                for c in range(Cg):
                    for k in range(K):
                        acc += w[f, c, k] * xp[bi, g * Cg + c, t * stride + k * dilation]
                out[bi, f, t] = acc + (0.0 if b is None else b[f])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_sleep_config(**kw):
    from eegalign.models import sleep_config
    cfg = dict(temporal_filters_per_branch=2, spatial_depth_multiplier=2, branch_dilations=(1, 2),
               kernel_size=3, block2_kernel=3, stage_kernel=3, pool1_kernel=2, pool2_kernel=4,
               block2_channels_per_branch=4, stage_channels=(4, 4))
    cfg.update(kw)
    return sleep_config(2, 32, 3, **cfg)


def micro_mi_config(**kw):
    from eegalign.models import motor_imagery_config
    cfg = dict(temporal_filters_per_branch=2, spatial_depth_multiplier=2, branch_dilations=(1, 2),
               kernel_size=3, block2_kernel=3, stage_kernel=3, pool1_kernel=2, pool2_kernel=2,
               final_pool=4, stage_channels=(4, 2), n_heads=2)
    cfg.update(kw)
    return motor_imagery_config(3, 32, n_classes=4, **cfg)


ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail=""):
    ACCEPTANCE[number] = (title, bool(ok), detail)
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title} :: {detail}")
