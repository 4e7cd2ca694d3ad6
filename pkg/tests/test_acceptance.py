"""End-to-end acceptance checks, one test per criterion.

The MNIST and parity trainings are shared session fixtures: the 45-epoch
MNIST runs feed the accuracy, ablation, step-sweep and straightness checks.
Each check reports its own share of the wall time against its budget.
"""
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from otformer import tensor as T
from otformer.cli import EXIT_OK, main
from otformer.config import build_data, build_train_config, load_config
from otformer.data import make_idx, parse_idx, serialize_idx
from otformer.diagnostics import (
    AblationRow,
    nan_consistent,
    paired_wins,
    straightness,
    sweep_steps,
)
from otformer.gradcheck import COMPOSITE_TOL, PRIMITIVE_TOL, run_suite
from otformer.models import ModelConfig, dumps_checkpoint, forward, init_model, loads_checkpoint
from otformer.ode import IntegratorConfig, Scheme, integrate, single_step_equivalence_input
from otformer.tensor import Tensor
from otformer.training import train, with_lambda

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist"
SEEDS = (0, 1, 2, 3, 4)

pytestmark = pytest.mark.acceptance


@dataclasses.dataclass
class Run:
    seed: int
    lam: float
    model: object
    record: object
    seconds: float

    def row(self) -> AblationRow:
        last = self.record.rows[-1]
        finished = [r.test_acc for r in self.record.rows if not r.nan_flag]
        best = max(finished, default=math.nan)
        return AblationRow(self.seed, self.lam, last.test_acc, best, last.train_acc,
                           self.record.nan_flag, len(self.record.rows))


def _paired_runs(config_name, **data_overrides):
    exp = load_config(ROOT / "configs" / config_name)
    exp = dataclasses.replace(exp, data=dataclasses.replace(exp.data, **data_overrides))
    data = build_data(exp)
    base = build_train_config(exp, data)
    runs = []
    for seed in SEEDS:
        for lam in (0.0, base.lam):
            t0 = time.perf_counter()
            model, rec = train(with_lambda(base, lam).with_seed(seed), data)
            runs.append(Run(seed, lam, model, rec, time.perf_counter() - t0))
    return data, base, runs


@pytest.fixture(scope="session")
def mnist_runs():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists():
        pytest.skip("MNIST files not present in data/mnist")
    return _paired_runs("mnist_ot.toml", path=str(MNIST_DIR))


@pytest.fixture(scope="session")
def parity_runs():
    return _paired_runs("parity_ot.toml")


def test_criterion_01_gradient_correctness(note):
    t0 = time.perf_counter()
    entries = run_suite(0)
    elapsed = time.perf_counter() - t0
    names = {e.result.name for e in entries}
    assert {"block", "objective"} <= names and len(names) >= 15
    for e in entries:
        assert e.tol == (COMPOSITE_TOL if e.result.name in ("block", "objective") else PRIMITIVE_TOL)
        assert e.result.max_rel_err < e.tol, (e.result.name, e.result.max_rel_err)
    note("gradcheck", worst=f"{max(e.result.max_rel_err for e in entries):.2e}", seconds=f"{elapsed:.1f}")
    assert elapsed < 60


def test_criterion_02_single_step_consistency():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(d=8, k=4, heads=2, depth=1, feature_dim=5, n_max=6, classes=3, precision="f64")
    ot = init_model(cfg, 0)
    for p in ot.parameters():
        p.data += rng.normal(0, 0.2, p.data.shape)
    vanilla = ot.with_variant("vanilla")
    Z = rng.normal(size=(4, 6, 5))
    a = forward(ot, Z, integrator=single_step_equivalence_input()).logits.data
    b = forward(vanilla, Z).logits.data
    assert a.dtype == np.float64 and a.tobytes() == b.tobytes()


def test_criterion_03_integrator_orders(note):
    A = np.array([[-0.5, 1.3], [-1.1, -0.2]])
    x0 = np.array([[1.0], [0.5]])
    # Euler at 1e6 steps, Richardson-extrapolated against 2e6 steps
    euler = lambda n: np.linalg.matrix_power(np.eye(2) + A / n, n) @ x0  # noqa: E731
    ref = 2 * euler(2_000_000) - euler(1_000_000)
    At = Tensor(A)
    orders = {}
    for scheme in Scheme:
        errs = [np.linalg.norm(integrate(Tensor(x0), lambda X: At @ X, IntegratorConfig(scheme, n)).final.data - ref)
                for n in (4, 8, 16, 32)]
        orders[scheme] = [math.log2(errs[i] / errs[i + 1]) for i in range(3)]
    note("orders", euler=np.round(orders[Scheme.EULER], 3).tolist(), rk4=np.round(orders[Scheme.RK4], 3).tolist())
    assert min(orders[Scheme.EULER]) >= 0.9
    assert min(orders[Scheme.RK4]) >= 3.7


def test_criterion_04_transport_cost_exactness():
    rng = np.random.default_rng(0)
    C = rng.normal(size=(2, 3, 5))
    X0 = Tensor(rng.normal(size=(2, 3, 5)))
    expected = (C**2).sum(axis=(-2, -1))
    for horizon in (1.0, 2.5):
        for scheme in Scheme:
            for n in (1, 2, 4, 8, 16, 20, 32):
                traj = integrate(X0, lambda X: T.broadcast_to(Tensor(C), X.shape),
                                 IntegratorConfig(scheme, n, horizon))
                err = np.max(np.abs(traj.transport_cost_raw.data - expected * horizon))
                assert err <= 1e-10, (scheme, n, horizon, err)


def test_criterion_05_mnist_accuracy(mnist_runs, note):
    _, base, runs = mnist_runs
    assert base.model.d == base.model.k == 64 and base.model.depth == 1 and base.model.heads == 1
    assert base.model.steps == 20 and base.lam == 0.01 and base.epochs == 45
    regularised = [r for r in runs if r.lam > 0 and r.seed in (0, 1, 2)]
    best = [r.row().best_test_acc for r in regularised]
    seconds = sum(r.seconds for r in regularised)
    note("mnist", best_test_acc=[round(b, 4) for b in best], seconds=f"{seconds:.0f}")
    assert seconds <= 15 * 60
    assert sum(b >= 0.90 for b in best) >= 2


@pytest.mark.parametrize("task", ["parity", "mnist"])
def test_criterion_06_regularisation_benefit(task, request, note):
    _, base, runs = request.getfixturevalue(f"{task}_runs")
    rows = [r.row() for r in runs]
    wins = paired_wins(rows, key="best_test_acc")
    pairs = [(round(rows[i].best_test_acc, 3), round(rows[i + 1].best_test_acc, 3)) for i in range(0, len(rows), 2)]
    note(f"ablate {task}", lam=base.lam, wins=wins, pairs=pairs, nan=[r.nan_flag for r in rows])
    assert nan_consistent(rows)
    assert sum(wins) >= 3


def test_criterion_06_runtime(mnist_runs, parity_runs, note):
    seconds = sum(r.seconds for r in mnist_runs[2] + parity_runs[2])
    note("ablate", seconds=f"{seconds:.0f}")
    assert seconds <= 30 * 60


def test_criterion_07_step_sweep(mnist_runs, note):
    data, base, runs = mnist_runs
    model = next(r.model for r in runs if r.seed == 0 and r.lam > 0)
    assert model.config.steps == 20
    t0 = time.perf_counter()
    acc = dict(sweep_steps(model, data.test_x, data.test_y, [1, 2, 4, 8, 16, 20]))
    elapsed = time.perf_counter() - t0
    note("sweep", acc={n: round(a, 4) for n, a in acc.items()}, seconds=f"{elapsed:.0f}")
    assert elapsed <= 120
    assert abs(acc[8] - acc[20]) <= 0.02
    # near chance: within 20 points of the 10% uniform guess
    assert acc[1] <= 1 / data.classes + 0.20


def test_criterion_08_straightness(mnist_runs, note):
    data, _, runs = mnist_runs
    t0 = time.perf_counter()
    ratio = {(r.seed, r.lam > 0): straightness(r.model, data.test_x).mean_ratio for r in runs}
    elapsed = time.perf_counter() - t0
    wins = [ratio[(s, True)] <= ratio[(s, False)] for s in SEEDS]
    pairs = [(round(ratio[(s, False)], 4), round(ratio[(s, True)], 4)) for s in SEEDS]
    note("straightness", pairs=pairs, seconds=f"{elapsed:.0f}")
    assert elapsed <= 5 * 60
    assert sum(wins) >= 3


def test_criterion_09_determinism_and_persistence(tmp_path):
    cfg = tmp_path / "p.toml"
    cfg.write_text('[experiment]\ntask = "parity"\n[data]\ncount = 60\ntest_count = 20\nmax_len = 6\n'
                   '[model]\nd = 8\nk = 4\nheads = 2\nsteps = 4\n[train]\nlr = 0.01\nepochs = 3\nbatch_size = 10\n')
    out = tmp_path / "run"
    snapshots = []
    for _ in range(2):
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        snapshots.append({name: (out / name).read_bytes() for name in ("run.csv", "model.ckpt", "config.echo")})
    assert snapshots[0] == snapshots[1]

    for precision in ("f32", "f64"):
        m = init_model(ModelConfig(d=8, k=4, heads=2, depth=2, feature_dim=3, n_max=5, classes=4,
                                   precision=precision), 3)
        blob = dumps_checkpoint(m, extra={"note": precision})
        back, extra = loads_checkpoint(blob)
        assert extra == {"note": precision} and dumps_checkpoint(back, extra) == blob
        for (na, a), (nb, b) in zip(m.named_parameters(), back.named_parameters()):
            assert na == nb and a.data.dtype == b.data.dtype and a.data.tobytes() == b.data.tobytes()

    blobs = [serialize_idx(make_idx(np.arange(24, dtype=">i4").reshape(2, 3, 4)))]
    blobs += [p.read_bytes() for p in sorted(MNIST_DIR.glob("*-ubyte"))]
    for blob in blobs:
        assert serialize_idx(parse_idx(blob)) == blob


def test_criterion_10_node_comparator():
    rng = np.random.default_rng(0)
    base = dict(d=8, k=4, heads=2, feature_dim=3, n_max=5, classes=3, steps=4, precision="f64")
    Z = rng.normal(size=(3, 5, 3))

    ot = init_model(ModelConfig(**base, depth=1, fc_mult=0), 1)
    node = ot.with_variant("node")
    a, b = forward(ot, Z), forward(node, Z)
    assert a.final_state.data.tobytes() == b.final_state.data.tobytes()
    assert a.logits.data.tobytes() == b.logits.data.tobytes()

    ot2 = init_model(ModelConfig(**base, depth=2), 2)
    node2 = ot2.with_variant("node")
    a2, b2 = forward(ot2, Z), forward(node2, Z)
    assert len(a2.trajectories) == 1 and len(b2.trajectories) == 2
    assert not np.allclose(a2.final_state.data, b2.final_state.data)
    assert not np.allclose(a2.logits.data, b2.logits.data)
