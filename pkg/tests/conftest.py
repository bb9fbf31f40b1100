import numpy as np
import pytest
import torch

from remake.scene_forge import Primitive, SceneSpec, generate_scene, random_scene_spec

torch.set_num_threads(1)


def sphere_spec(seed=0, resolution=(64, 64), ratios=(0.6008, 0.1747, 0.2245), **kw):
    """One large transparent sphere in front of a plane; ~900 transparent pixels at 64x64."""
    prims = (Primitive("sphere", (0.01, -0.005, 0.5), (0.12,), transparent=True, color=(0.8, 0.9, 0.9)),)
    return SceneSpec(resolution=resolution, primitives=prims, background_depth=0.8, ratios=ratios,
                     seed=seed, **kw)


@pytest.fixture
def sample():
    return generate_scene(random_scene_spec(3))


@pytest.fixture
def sphere_sample():
    return generate_scene(sphere_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_inputs(cfg, seed, batch=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    H, W = cfg.height, cfg.width
    rgb = torch.rand(batch, H, W, 3, generator=g, dtype=dtype)
    mask = (torch.rand(batch, H, W, generator=g) < 0.4).to(dtype)
    rel = torch.rand(batch, H, W, generator=g, dtype=dtype)
    depth = 0.4 + 0.6 * torch.rand(batch, H, W, generator=g, dtype=dtype)
    depth = depth * (torch.rand(batch, H, W, generator=g) > 0.1).to(dtype)
    return rgb, mask, rel, depth


def gradient_check(net, inputs, seed, entries_per_tensor=3, h=1e-6):
    """Autograd vs central differences on sampled entries of every parameter tensor.

    Loss is smooth: a fixed random projection of the output plus half its mean square.
    Returns {top-level module name: relative error over that group's sampled entries}.
    """
    g = torch.Generator().manual_seed(seed + 1)
    out_shape = net(*inputs).shape
    w = torch.randn(out_shape, generator=g, dtype=torch.float64)

    def loss():
        out = net(*inputs)
        return (w * out).sum() + 0.5 * (out * out).mean()

    net.zero_grad()
    loss().backward()
    analytic, numeric = {}, {}
    for name, p in net.named_parameters():
        group = name.split(".")[0]
        flat = p.data.view(-1)
        idx = torch.randperm(flat.numel(), generator=g)[:entries_per_tensor]
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + h
                lp = loss().item()
                flat[i] = orig - h
                lm = loss().item()
                flat[i] = orig
            numeric.setdefault(group, []).append((lp - lm) / (2 * h))
            analytic.setdefault(group, []).append(p.grad.view(-1)[i].item())
    errors = {}
    for group in analytic:
        a, n = np.array(analytic[group]), np.array(numeric[group])
        errors[group] = float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))
    return errors


# -- acceptance reporting: one pass/fail line per criterion ---------------------

_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not rep.failed:
        return
    n = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    line = f"criterion {n:>2}: {status}  {marker.kwargs.get('title', '')}"
    _criteria[n] = line + (f"  [{detail}]" if detail else "")
    print("\n" + _criteria[n])


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])
