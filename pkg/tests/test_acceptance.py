"""Acceptance gate: nine end-to-end checks over the whole stack.

Each check prints one `[criterion N] PASS/FAIL: ...` line on the real
terminal (capture is bypassed for that line only) and then asserts, so a
plain `pytest -v` run shows every verdict even when all tests pass.

The cross-domain experiment (criterion 8) trains twelve models and takes
most of the suite's runtime; everything else finishes in seconds to a
couple of minutes.
"""

from __future__ import annotations

import time

import numpy as np
import pytest

from taskaug import tensor as T
from taskaug.augment import AugmentConfig, apply_random_convolution, ascend_task, random_convolution, task_distance
from taskaug.models import (
    HeadKind,
    ModelConfig,
    init_params,
    label_propagation_logits,
    meta_loss,
)
from taskaug.tasks import DomainSpec, Task, domain_splits, sample_episode
from taskaug.tensor import Tape, Tensor, backward, grad_check, make_optimizer
from taskaug.train import (
    TrainConfig,
    derive_eval_seed,
    episode_seed_stream,
    evaluate,
    finetune_baseline,
    meta_train,
    next_seed,
)

SMALL_MODEL = ModelConfig(image_size=8, conv_channels=(4, 6, 6))

# the cross-domain experiment (criterion 8); the relation head converges
# visibly slower on the augmented task stream, so it gets a longer budget
EXP_MODEL = ModelConfig(image_size=16, conv_channels=(16, 32, 32))
EXP_IMAGES_PER_CLASS = 40
EXP_ITERATIONS = {"prototypical": 800, "relation": 1600}
EXP_BASELINE = AugmentConfig(t_max=0, p=1.0)
EXP_ASCENT = AugmentConfig(t_max=5, p=0.6, beta=1.0)
EXP_SEEDS = (0, 1, 2)
EXP_EVAL_EPISODES = 600
EXP_EVAL_SEED = 777


def _verdict(capfd, num: int, ok: bool, detail: str) -> None:
    line = f"[criterion {num}] {'PASS' if ok else 'FAIL'}: {detail}"
    with capfd.disabled():
        print(f"\n{line}")
    assert ok, line


@pytest.fixture(scope="module")
def small_splits():
    return domain_splits(DomainSpec(image_size=8), images_per_class=12)


@pytest.fixture(scope="module")
def exp_splits():
    specs = {
        "source": DomainSpec(),
        "hue150": DomainSpec(hue_rotation_deg=150.0),
        "texswap": DomainSpec(texture_swap=True),
    }
    return {name: domain_splits(spec, EXP_IMAGES_PER_CLASS) for name, spec in specs.items()}


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness


def _mixed(op):
    """Scalarize `op` by a weighted sum with weights frozen on first call.

    The weights must not change between calls: grad_check re-evaluates the
    function for every finite-difference probe. Random weights keep sign
    cancellations from hiding a wrong backward rule.
    """
    cache: dict[str, np.ndarray] = {}

    def f(x: Tensor) -> Tensor:
        out = op(x)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(12345).normal(size=out.shape)
        return T.reduce_sum(T.mul(out, Tensor(cache["w"])))

    return f


def _op_cases(seed: int):
    """(name, f, x) triples covering every differentiable op and input slot."""
    rng = np.random.default_rng(seed)

    def vec(*shape):
        return rng.normal(size=shape)

    def away_from_zero(*shape):
        return (rng.uniform(0.3, 1.2, size=shape)) * rng.choice([-1.0, 1.0], size=shape)

    def positive(*shape):
        return rng.uniform(0.5, 2.0, size=shape)

    a34, b34 = vec(3, 4), vec(3, 4)
    m23, m34 = vec(2, 3), vec(3, 4)
    feats_a, feats_b = vec(4, 3), vec(5, 3)
    solve_a = np.eye(4) * 3.0 + 0.1 * vec(4, 4)
    solve_b = vec(4, 2)
    dense_x, dense_w, dense_b = vec(5, 3), vec(3, 4), vec(4)
    imgs = vec(2, 2, 6, 6)
    kern = vec(3, 2, 3, 3) * 0.5
    # distinct values so the pooling argmax cannot flip under eps probes
    pool_in = vec(1, 2, 4, 4) + np.arange(32).reshape(1, 2, 4, 4) * 0.37
    logits = vec(5, 4)
    labels = rng.integers(0, 4, size=5)
    idx = np.array([0, 2, 2, 1])

    cases = [
        ("add_a", _mixed(lambda x: T.add(x, Tensor(b34))), Tensor(a34.copy())),
        ("add_b", _mixed(lambda x: T.add(Tensor(a34), x)), Tensor(b34.copy())),
        ("add_broadcast", _mixed(lambda x: T.add(Tensor(a34), x)), Tensor(vec(4))),
        ("sub_a", _mixed(lambda x: T.sub(x, Tensor(b34))), Tensor(a34.copy())),
        ("sub_b", _mixed(lambda x: T.sub(Tensor(a34), x)), Tensor(b34.copy())),
        ("mul_a", _mixed(lambda x: T.mul(x, Tensor(b34))), Tensor(a34.copy())),
        ("mul_b", _mixed(lambda x: T.mul(Tensor(a34), x)), Tensor(b34.copy())),
        ("mul_broadcast", _mixed(lambda x: T.mul(Tensor(a34), x)), Tensor(vec(1, 4))),
        ("scale", _mixed(lambda x: T.scale(x, -1.7)), Tensor(a34.copy())),
        ("relu", _mixed(T.relu), Tensor(away_from_zero(3, 4))),
        ("square", _mixed(T.square), Tensor(a34.copy())),
        ("sqrt", _mixed(T.sqrt), Tensor(positive(3, 4))),
        ("exp", _mixed(T.exp), Tensor(a34.copy())),
        ("log", _mixed(T.log), Tensor(positive(3, 4))),
        ("reduce_sum_all", T.reduce_sum, Tensor(a34.copy())),
        ("reduce_sum_axis", _mixed(lambda x: T.reduce_sum(x, axis=0)), Tensor(a34.copy())),
        ("reduce_mean_all", T.reduce_mean, Tensor(a34.copy())),
        ("reduce_mean_axis", _mixed(lambda x: T.reduce_mean(x, axis=1)), Tensor(a34.copy())),
        ("reshape", _mixed(lambda x: T.reshape(x, (4, 3))), Tensor(a34.copy())),
        ("concat", _mixed(lambda x: T.concat([x, Tensor(b34)], axis=0)), Tensor(a34.copy())),
        ("take_rows_repeated", _mixed(lambda x: T.take_rows(x, idx)), Tensor(a34.copy())),
        ("euclidean_pairwise_a", _mixed(lambda x: T.euclidean_pairwise(x, Tensor(feats_b))), Tensor(feats_a.copy())),
        ("euclidean_pairwise_b", _mixed(lambda x: T.euclidean_pairwise(Tensor(feats_a), x)), Tensor(feats_b.copy())),
        ("dense_x", _mixed(lambda x: T.dense(x, Tensor(dense_w), Tensor(dense_b))), Tensor(dense_x.copy())),
        ("dense_w", _mixed(lambda x: T.dense(Tensor(dense_x), x, Tensor(dense_b))), Tensor(dense_w.copy())),
        ("dense_b", _mixed(lambda x: T.dense(Tensor(dense_x), Tensor(dense_w), x)), Tensor(dense_b.copy())),
        ("matmul_a", _mixed(lambda x: T.matmul(x, Tensor(m34))), Tensor(m23.copy())),
        ("matmul_b", _mixed(lambda x: T.matmul(Tensor(m23), x)), Tensor(m34.copy())),
        ("linear_solve_a", _mixed(lambda x: T.linear_solve(x, Tensor(solve_b))), Tensor(solve_a.copy())),
        ("linear_solve_b", _mixed(lambda x: T.linear_solve(Tensor(solve_a), x)), Tensor(solve_b.copy())),
        ("conv2d_x", _mixed(lambda x: T.conv2d(x, Tensor(kern), stride=1, padding=1)), Tensor(imgs.copy())),
        ("conv2d_kernel", _mixed(lambda x: T.conv2d(Tensor(imgs), x, stride=1, padding=1)), Tensor(kern.copy())),
        ("conv2d_strided_x", _mixed(lambda x: T.conv2d(x, Tensor(kern), stride=2, padding=0)), Tensor(imgs.copy())),
        ("max_pool2d", _mixed(lambda x: T.max_pool2d(x, window=2)), Tensor(pool_in.copy())),
        ("softmax_cross_entropy", lambda x: T.softmax_cross_entropy(x, labels), Tensor(logits.copy())),
    ]
    return cases


def _tiny_task(splits, seed: int) -> Task:
    return sample_episode(splits["test"], 2, 1, 2, rng_seed=seed)


def test_criterion_1_gradient_correctness(capfd, small_splits):
    start = time.perf_counter()
    bound = 1e-4
    worst = 0.0
    worst_name = ""
    for seed in range(10):
        for name, f, x in _op_cases(seed):
            err = grad_check(f, x, eps=1e-4)
            if err > worst:
                worst, worst_name = err, f"{name}@seed{seed}"

    heads = (
        HeadKind(),
        HeadKind(kind="relation", hidden=16),
        HeadKind(kind="label_propagation", alpha=0.9, sigma=2.0),
    )
    for head in heads:
        params = init_params(SMALL_MODEL, head, seed=11)
        for seed in range(10):
            # these episode seeds keep every probed pixel away from relu
            # kinks; central differences are invalid on a kink, so a probe
            # straddling one reports a fake mismatch against an exact
            # analytic gradient
            task = _tiny_task(small_splits, seed=5000 + seed)

            def loss_of_pixels(x, task=task, params=params, head=head):
                moved = Task(
                    x, task.support_y, task.query_x, task.query_y,
                    task.way, task.shot, task.query_count,
                )
                return meta_loss(params, head, moved)

            err = grad_check(
                loss_of_pixels,
                Tensor(task.support_x.data.copy()),
                eps=1e-4,
                max_coords=40,
                seed=seed,
            )
            if err > worst:
                worst, worst_name = err, f"meta_loss[{head.kind}]@seed{seed}"
    elapsed = time.perf_counter() - start
    ok = worst < bound and elapsed < 60.0
    _verdict(capfd, 1, ok,
             f"max grad error {worst:.2e} ({worst_name}), bound 1e-4, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: reduction to a plain episodic trainer


def test_criterion_2_reduction_identity(capfd, small_splits):
    start = time.perf_counter()
    data = small_splits["train"]
    cfg = TrainConfig(
        iterations=50, way=2, shot=1, train_queries=3, eval_queries=3,
        model=SMALL_MODEL, head=HeadKind(), augment=AugmentConfig(t_max=0, p=1.0),
        seed=7,
    )

    trajectory: list[dict[str, bytes]] = []
    init = init_params(SMALL_MODEL, HeadKind(), seed=7)
    meta_train(
        data, init, cfg,
        on_iteration=lambda it, p, rec: trajectory.append(
            {name: t.data.tobytes() for name, t in p.items()}
        ),
    )

    plain = init_params(SMALL_MODEL, HeadKind(), seed=7)
    opt = make_optimizer(cfg.optimizer, cfg.outer_lr, cfg.momentum)
    stream = episode_seed_stream(cfg.seed)
    mismatches = 0
    for it in range(cfg.iterations):
        task = sample_episode(data, cfg.way, cfg.shot, cfg.train_queries, next_seed(stream))
        with Tape():
            loss = meta_loss(plain, plain.head, task)
            backward(loss)
        opt.step(plain)
        for name, t in plain.items():
            if t.data.tobytes() != trajectory[it][name]:
                mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and len(trajectory) == 50 and elapsed < 60.0
    _verdict(capfd, 2, ok,
             f"50 iterations, {mismatches} tensor mismatches, bit-identical, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: the ascent raises the loss on a trained model


def test_criterion_3_ascent_property(capfd, exp_splits):
    start = time.perf_counter()
    head = HeadKind()
    cfg = TrainConfig(
        iterations=300, way=5, shot=1, train_queries=8, eval_queries=8,
        model=EXP_MODEL, head=head, augment=AugmentConfig(t_max=0, p=1.0), seed=0,
    )
    init = init_params(EXP_MODEL, head, seed=0)
    params = meta_train(exp_splits["source"]["train"], init, cfg)

    ascent = AugmentConfig(t_max=5, p=0.6, beta=1.0)
    increased = 0
    traces_ok = True
    for i in range(100):
        task = sample_episode(
            exp_splits["source"]["test"], 5, 1, 8, derive_eval_seed(424242, i)
        )
        trace: list[float] = []
        out = ascend_task(params, head, task, ascent, trace=trace)
        traces_ok = traces_ok and len(trace) == ascent.t_max
        final = float(meta_loss(params, head, out).data)
        if final > trace[0]:
            increased += 1
    elapsed = time.perf_counter() - start
    ok = increased >= 95 and traces_ok and elapsed < 120.0
    _verdict(capfd, 3, ok,
             f"{increased}/100 episodes ended above the initial loss, "
             f"per-step traces logged, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: labels untouched, shapes preserved


def test_criterion_4_label_and_shape_preservation(capfd, small_splits):
    params = init_params(SMALL_MODEL, HeadKind(), seed=3)
    pool = (1, 3, 5, 7, 11, 15)
    problems = []

    for seed in range(5):
        task = sample_episode(small_splits["test"], 3, 2, 4, rng_seed=seed)
        sy, qy = task.support_y.copy(), task.query_y.copy()
        climbed = ascend_task(
            params, HeadKind(), task, AugmentConfig(t_max=3, p=0.6, beta=0.5)
        )
        if not (np.array_equal(climbed.support_y, sy) and np.array_equal(climbed.query_y, qy)):
            problems.append(f"ascend labels@{seed}")
        mixed = apply_random_convolution(task, pool, rng_seed=seed)
        if not (np.array_equal(mixed.support_y, sy) and np.array_equal(mixed.query_y, qy)):
            problems.append(f"randconv labels@{seed}")
        if not (np.array_equal(task.support_y, sy) and np.array_equal(task.query_y, qy)):
            problems.append(f"input mutated@{seed}")

    images = Tensor(np.random.default_rng(0).normal(size=(4, 3, 8, 8)))
    for k in pool:
        out = random_convolution(images, (k,), rng_seed=k)
        if out.shape != images.shape:
            problems.append(f"shape k={k}: {out.shape}")
    ok = not problems
    _verdict(capfd, 4, ok,
             f"labels byte-identical, shapes preserved for k in {pool}"
             + (f"; problems: {problems}" if problems else ""))


# ---------------------------------------------------------------------------
# criterion 5: label propagation against an iterative oracle


def test_criterion_5_label_propagation_oracle(capfd):
    alpha, sigma = 0.9, 2.0
    head = HeadKind(kind="label_propagation", alpha=alpha, sigma=sigma)
    way, shot, queries = 4, 2, 6
    n_support = way * shot
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        support_f = rng.normal(size=(n_support, 8))
        query_f = rng.normal(size=(queries, 8))
        support_y = np.repeat(np.arange(way), shot)
        rng.shuffle(support_y)

        logits = label_propagation_logits(
            head, Tensor(support_f), support_y, Tensor(query_f), way
        ).data

        feats = np.concatenate([support_f, query_f], axis=0)
        n = feats.shape[0]
        sq = ((feats[:, None, :] - feats[None, :, :]) ** 2).sum(axis=2)
        w = np.exp(-sq / (2.0 * sigma**2)) * (1.0 - np.eye(n))
        inv_root = 1.0 / np.sqrt(w.sum(axis=1))
        s = w * inv_root[:, None] * inv_root[None, :]
        y = np.zeros((n, way))
        y[np.arange(n_support), support_y] = 1.0
        f = np.zeros_like(y)
        for _ in range(200):
            f = alpha * (s @ f) + y
        worst = max(worst, float(np.abs(logits - f[n_support:]).max()))
    ok = worst < 1e-6
    _verdict(capfd, 5, ok,
             f"closed form vs 200-step propagation, max abs error {worst:.2e} over 20 episodes")


# ---------------------------------------------------------------------------
# criterion 6: regularizer mechanics


def _max_displacement(before: Task, after: Task) -> float:
    return max(
        float(np.abs(after.support_x.data - before.support_x.data).max()),
        float(np.abs(after.query_x.data - before.query_x.data).max()),
    )


def test_criterion_6_regularizer_mechanics(capfd, small_splits):
    params = init_params(SMALL_MODEL, HeadKind(), seed=0)
    head = HeadKind()
    task = sample_episode(small_splits["test"], 3, 2, 4, rng_seed=99)

    # the gamma=1e6 well has curvature ~2*gamma*|J|^2/n, so the step size
    # must sit below the stability threshold; at this scale that means
    # beta around 1e-5 (larger steps oscillate and amplify instead)
    beta = 1e-5
    pinned = ascend_task(
        params, head, task,
        AugmentConfig(t_max=5, p=0.6, beta=beta, gamma=1e6, reg_kind="euclid"),
    )
    free = ascend_task(
        params, head, task,
        AugmentConfig(t_max=5, p=0.6, beta=beta, gamma=0.0, reg_kind="none"),
    )
    disp_pinned = _max_displacement(task, pinned)
    disp_free = _max_displacement(task, free)

    self_euclid = task_distance(task, task, "euclid", params, head)
    self_mmd = task_distance(task, task, "mmd", params, head)

    violations = 0
    for seed in range(100):
        a = sample_episode(small_splits["test"], 2, 1, 2, rng_seed=2000 + seed)
        b = sample_episode(small_splits["test"], 2, 1, 2, rng_seed=3000 + seed)
        if task_distance(a, b, "mmd", params, head) > task_distance(a, b, "euclid", params, head):
            violations += 1

    ok = (
        disp_pinned < 1e-3
        and disp_pinned < disp_free
        and self_euclid == 0.0
        and self_mmd == 0.0
        and violations == 0
    )
    _verdict(capfd, 6, ok,
             f"pinned displacement {disp_pinned:.2e} (free {disp_free:.2e}), "
             f"self distances exactly 0, mmd <= euclid on 100/100 pairs")


# ---------------------------------------------------------------------------
# criterion 7: evaluation statistics


def test_criterion_7_evaluation_statistics(capfd, small_splits):
    start = time.perf_counter()
    head = HeadKind(kind="uniform_random")
    params = init_params(SMALL_MODEL, head, seed=0)
    reports = [
        evaluate(params, head, small_splits["test"], episodes=2000, way=5,
                 shot=1, queries_per_class=3, seed=31)
        for _ in range(2)
    ]
    rep = reports[0]
    accs = rep.per_episode_accuracies
    ci_expected = 1.96 * accs.std(ddof=1) / np.sqrt(len(accs))
    ci_err = abs(rep.ci95_halfwidth - ci_expected)
    identical = accs.tobytes() == reports[1].per_episode_accuracies.tobytes()
    elapsed = time.perf_counter() - start
    ok = (
        0.17 <= rep.mean_accuracy <= 0.23
        and ci_err < 1e-12
        and identical
        and elapsed < 120.0
    )
    _verdict(capfd, 7, ok,
             f"mean {rep.mean_accuracy:.4f} in [0.17, 0.23], CI formula error "
             f"{ci_err:.1e}, reruns byte-identical, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 9: per-task fine-tuning protocol constants


def test_criterion_9_finetune_protocol(capfd, small_splits):
    encoder = init_params(SMALL_MODEL, HeadKind(), seed=4)
    checks = []
    for shot, want_epochs in ((1, 30), (5, 50)):
        task = sample_episode(small_splits["test"], 5, shot, 3, rng_seed=shot)
        res = finetune_baseline(encoder, task, seed=shot)
        checks.append(
            res.epochs_run == want_epochs
            and res.pseudo_per_epoch == 5 * 15
            and res.pseudo_total == want_epochs * 75
            and res.optimizer == "sgd_momentum"
            and res.lr == 0.01
            and res.momentum == 0.9
        )
    ok = all(checks)
    _verdict(capfd, 9, ok,
             "C*15 pseudo samples per epoch, sgd lr 0.01 momentum 0.9, "
             "30/50 epochs for 1/5-shot, counters echoed")


# ---------------------------------------------------------------------------
# criterion 8: the cross-domain experiment (slowest, runs last)


def test_criterion_8_cross_domain_gain(capfd, exp_splits):
    start = time.perf_counter()
    heads = {
        "prototypical": HeadKind(),
        "relation": HeadKind(kind="relation", hidden=64),
    }
    accs: dict[tuple[str, str, int], dict[str, float]] = {}
    for hname, head in heads.items():
        for vname, aug in (("baseline", EXP_BASELINE), ("ascent", EXP_ASCENT)):
            for seed in EXP_SEEDS:
                cfg = TrainConfig(
                    iterations=EXP_ITERATIONS[hname], way=5, shot=1,
                    train_queries=8, eval_queries=8, val_every=50,
                    val_episodes=60, model=EXP_MODEL, head=head,
                    augment=aug, seed=seed,
                )
                init = init_params(EXP_MODEL, head, seed=seed)
                params = meta_train(
                    exp_splits["source"]["train"], init, cfg,
                    val_data=exp_splits["source"]["val"],
                )
                accs[(hname, vname, seed)] = {
                    dom: evaluate(
                        params, head, splits["test"], episodes=EXP_EVAL_EPISODES,
                        way=5, shot=1, queries_per_class=8, seed=EXP_EVAL_SEED,
                    ).mean_accuracy
                    for dom, splits in exp_splits.items()
                }

    details = []
    ok = True
    for hname in heads:
        def mean_of(vname: str, what: str) -> float:
            if what == "shifted":
                return float(np.mean([
                    (accs[(hname, vname, s)]["hue150"] + accs[(hname, vname, s)]["texswap"]) / 2
                    for s in EXP_SEEDS
                ]))
            return float(np.mean([accs[(hname, vname, s)][what] for s in EXP_SEEDS]))

        gain = (mean_of("ascent", "shifted") - mean_of("baseline", "shifted")) * 100
        src_drop = (mean_of("baseline", "source") - mean_of("ascent", "source")) * 100
        ok = ok and gain >= 2.0 and src_drop <= 1.0
        details.append(f"{hname} shifted {gain:+.2f} pts, source drop {src_drop:+.2f} pts")
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 1800.0
    _verdict(capfd, 8, ok,
             "; ".join(details) + f"; 3 seeds, 600 episodes/domain, {elapsed/60:.1f} min")
