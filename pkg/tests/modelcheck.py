"""Model-level oracles: perturbation-measured receptive field, causality, gradient check."""

import numpy as np

from ddxnet import ops
from ddxnet.model import DDxConfig, DilationMode, Head, build, forward, min_length
from ddxnet.ops import Mode
from ddxnet.tensor import Tape, Tensor, backward

from gradcheck import H, max_rel_error


def random_config(rng, max_stages=3, head=Head.MULTICLASS) -> DDxConfig:
    stages = int(rng.integers(1, max_stages + 1))
    if rng.random() < 0.3:
        mode = DilationMode.fixed(int(rng.integers(1, 4)))
    else:
        mode = DilationMode.exponential()
    return DDxConfig(
        in_channels=int(rng.integers(1, 4)),
        num_classes=int(rng.integers(2, 6)),
        head=head,
        stages=stages,
        blocks_per_stage=int(rng.integers(1, 4)),
        growth_rate=int(rng.integers(1, 6)),
        kernel_size=int(rng.integers(1, 5)),
        bottleneck_factor=int(rng.integers(1, 4)),
        compression=float(rng.choice([0.5, 0.75, 1.0])),
        stem_channels=int(rng.integers(2, 9)),
        stem_kernel=int(rng.integers(1, 6)),
        dilation_mode=mode,
    )


def bypass_normalization(model):
    """Unit gamma, zero beta, running (0, 1): eval-mode bn becomes x / sqrt(1 + eps)."""
    for name, p in model.params.items():
        if name.endswith(".gamma"):
            p.data[...] = 1.0
        elif name.endswith(".beta"):
            p.data[...] = 0.0
    for site, (m, v) in model.running.items():
        model.running[site] = (np.zeros_like(m), np.ones_like(v))


def measured_receptive_field(config: DDxConfig, seed: int = 0) -> tuple[int, bool]:
    """Count input time steps whose perturbation moves the final-position features.

    Weights are made positive and inputs positive so every ReLU passes and any
    structural dependency shows up as a strictly positive change.  Returns
    ``(span, contiguous)`` where contiguous means the dependent steps are exactly
    the trailing block of the input.
    """
    from ddxnet.model import receptive_field

    model = build(config, seed=seed, dtype=np.float64)
    bypass_normalization(model)
    for name, p in model.params.items():
        if name.endswith(".w"):
            p.data[...] = np.abs(p.data) + 0.05
        elif name.endswith(".b"):
            p.data[...] = 0.0
    unit = min_length(config)
    rf_bound = receptive_field(config)
    t = unit * (rf_bound // unit + 3)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.5, 1.5, (1, config.in_channels, t))

    def last_features(inp):
        trace = {}
        forward(model, Tensor(inp), Mode.EVAL, trace=trace)
        return trace["final"][0, :, -1]

    base = last_features(x)
    dependent = []
    for s in range(t):
        x2 = x.copy()
        x2[:, :, s] += 10.0
        if not np.array_equal(last_features(x2), base):
            dependent.append(s)
    span = len(dependent)
    contiguous = dependent == list(range(t - span, t))
    return span, contiguous


def _stage_of(name: str) -> int:
    if name.startswith("stage"):
        return int(name[len("stage"):].split(".")[0])
    if name.startswith("transition"):
        return int(name[len("transition"):].split(".")[0])
    return 0


def causality_violations(config: DDxConfig, seed: int) -> list[str]:
    """Perturb inputs after t0 in eval mode and list features at <= t0 that changed.

    Running statistics and affine parameters are randomized but frozen (eval
    mode).  A feature at coarse index i of stage s covers input samples up to
    (i + 1) * 2**s - 1; only features whose whole span ends at or before t0 are
    compared.
    """
    rng = np.random.default_rng(seed)
    model = build(config, seed=seed, dtype=np.float64)
    for name, p in model.params.items():
        if name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            p.data[...] = rng.standard_normal(p.shape) * 0.1
    for site, (m, v) in model.running.items():
        model.running[site] = (rng.standard_normal(m.shape) * 0.1, rng.uniform(0.5, 2.0, v.shape))
    unit = min_length(config)
    t = unit * int(rng.integers(4, 12))
    t0 = int(rng.integers(0, t - 1))
    x = rng.standard_normal((2, config.in_channels, t))
    x2 = x.copy()
    x2[:, :, t0 + 1 :] = rng.standard_normal(x2[:, :, t0 + 1 :].shape) * 5.0
    tr1, tr2 = {}, {}
    forward(model, Tensor(x), Mode.EVAL, trace=tr1)
    forward(model, Tensor(x2), Mode.EVAL, trace=tr2)
    bad = []
    for name in tr1:
        s = config.stages - 1 if name == "final" else _stage_of(name)
        scale = 2**s
        keep = (t0 + 1) // scale
        if keep and not np.array_equal(tr1[name][:, :, :keep], tr2[name][:, :, :keep]):
            bad.append(name)
    if np.array_equal(tr1["stem"], tr2["stem"]):
        bad.append("no-op perturbation")
    return bad


def model_gradcheck(config: DDxConfig, seed: int, n: int = 3, t: int = 32, mode=Mode.TRAIN):
    """Max relative error of every parameter and input gradient vs central differences.

    Entries whose +h/-h evaluations flip any ReLU mask (a kink inside the FD
    interval) are excluded as non-differentiable; the count is returned.
    """
    rng = np.random.default_rng(seed)
    model = build(config, seed=seed, dtype=np.float64)
    for name, p in model.params.items():
        if name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(".beta") or name.endswith(".b"):
            p.data[...] = rng.standard_normal(p.shape) * 0.1
    x = Tensor(rng.standard_normal((n, config.in_channels, t)))
    if config.head is Head.MULTICLASS:
        targets = rng.integers(0, config.num_classes, n)
    else:
        targets = rng.integers(0, 2, (n, config.num_classes))
    frozen = dict(model.running)

    def run(with_tape):
        model.running.update(frozen)
        tape = Tape() if with_tape else None
        probe = Tape()
        logits = forward(model, x, mode, tape if with_tape else probe)
        if config.head is Head.MULTICLASS:
            loss, _ = ops.softmax_cross_entropy(logits, targets, tape=tape)
        else:
            loss, _ = ops.sigmoid_bce(logits, targets, tape=tape)
        masks = [(nd.output.data > 0).tobytes() for nd in (tape or probe).nodes if nd.op == "relu"]
        return loss, tape, masks

    loss, tape, _ = run(True)
    model.zero_grad()
    grads = backward(tape, loss, inputs=[x])
    analytic = {name: g.copy() for name, g in model.grads().items()}
    analytic["input"] = grads[x]
    arrays = {name: p.data for name, p in model.params.items()}
    arrays["input"] = x.data

    worst, skipped = 0.0, 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + H
            lp, _, mp = run(False)
            flat[i] = orig - H
            lm, _, mm = run(False)
            flat[i] = orig
            if mp != mm:
                skipped += 1
                continue
            num = (lp.item() - lm.item()) / (2 * H)
            worst = max(worst, max_rel_error(a_flat[i], num))
    model.running.update(frozen)
    return worst, skipped
