"""Headline acceptance criteria, one PASS/FAIL line each.

The training-based criteria share a session fixture: per seed, one dataset
and one stage-1 run feed the stage-1 accuracy check, the silhouette
comparison and the three-way stage-2 ablation.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from conftest import acceptance_line
from gestpose import runs
from gestpose import tensor as T
from gestpose.checkpoint import load_checkpoint, save_checkpoint
from gestpose.config import RunConfig
from gestpose.data import build_taxonomy, generate_dataset, stack_batch, write_dataset
from gestpose.gradcheck import as_leaf, grad_check
from gestpose.hand import (IDENTITY_6D, apply_shape, default_tree, hand_forward_np, matrix_to_rot6d,
                           pose_hand, rot6d_to_matrix, skin_mesh)
from gestpose.losses import TERMS, LossWeights, compute_losses, silhouette_score
from gestpose.pipeline import evaluate, soft_argmax_3d
from gestpose.pretrain import ClassifierHeads, EncoderConfig, GestureEncoder, alpha_schedule, embed
from gestpose.optim import ParamStore

SEEDS = (0, 1, 2)
ABLATION_EPOCHS = 60
TREE = default_tree()


# ---------------------------------------------------------------- 1. gradients

def _op_cases(r):
    """(name, leaves, scalar fn) for every differentiable primitive."""
    x = as_leaf(r.normal(size=(3, 4)), "x")
    y = as_leaf(r.normal(size=(3, 4)), "y")
    kink_free = as_leaf(np.sign(r.normal(size=(3, 4))) * r.uniform(0.2, 2, size=(3, 4)), "k")
    m = as_leaf(r.normal(size=(4, 5)), "m")
    b = as_leaf(r.normal(size=(2, 3, 4)), "b")
    bias = as_leaf(r.normal(size=4), "bias")
    v = as_leaf(r.normal(size=(4, 3)), "v")
    u = as_leaf(r.normal(size=(4, 3)), "u")
    g, be = as_leaf(r.uniform(0.5, 1.5, size=4), "gain"), as_leaf(r.normal(size=4), "beta")
    img = as_leaf(r.normal(size=(1, 2, 4, 4)), "img")
    feat = as_leaf(r.normal(size=(1, 4, 4, 3)), "feat")
    xy = as_leaf(np.floor(r.uniform(0, 2.9, size=(1, 5, 2))) + r.uniform(0.1, 0.9, size=(1, 5, 2)), "xy")
    r6 = as_leaf(matrix_to_rot6d(Rotation.random(4, random_state=int(r.integers(1 << 30))).as_matrix())
                 + r.normal(0, 0.1, size=(4, 6)), "r6")
    w34 = r.normal(size=(3, 4)).astype(np.float32)
    labels = r.integers(0, 4, size=3)
    return [
        ("add", [x, y], lambda: T.mul(T.add(x, y), w34).sum()),
        ("sub", [x, y], lambda: T.mul(T.sub(x, y), w34).sum()),
        ("mul", [x, y], lambda: T.mul(x, y).sum()),
        ("scale", [x], lambda: T.mul(T.scale(x, 1.7, 0.3), w34).sum()),
        ("relu", [kink_free], lambda: T.mul(T.relu(kink_free), w34).sum()),
        ("abs", [kink_free], lambda: T.mul(T.tabs(kink_free), w34).sum()),
        ("gelu", [x], lambda: T.mul(T.gelu(x), w34).sum()),
        ("sigmoid", [x], lambda: T.mul(T.sigmoid(x), w34).sum()),
        ("square", [x], lambda: T.mul(T.square(x), w34).sum()),
        ("matmul", [x, m], lambda: T.square(T.matmul(x, m)).sum()),
        ("batched matmul", [b, m], lambda: T.square(T.matmul(b, m)).sum()),
        ("add_bias", [b, bias], lambda: T.square(T.add_bias(b, bias)).sum()),
        ("cross", [v, u], lambda: T.square(T.cross(v, u)).sum()),
        ("sum/mean", [b], lambda: T.square(T.mean(T.tsum(b, axis=0), axis=1)).sum()),
        ("reshape/transpose", [b], lambda: T.mul(T.transpose(T.reshape(b, (6, 4)), (1, 0)),
                                                 np.arange(24, dtype=np.float32).reshape(4, 6)).sum()),
        ("getitem/concat/stack", [x, y], lambda: T.square(T.stack(
            [T.concat([x[:, :2], y[:, 2:]], axis=1), y], axis=0)).sum()),
        ("softmax", [x], lambda: T.mul(T.softmax(x, axis=-1), w34).sum()),
        ("layernorm", [x, g, be], lambda: T.mul(T.layernorm(x, g, be), w34).sum()),
        ("cross_entropy", [x], lambda: T.cross_entropy_logits(x, labels)),
        ("avg_pool2d", [img], lambda: T.square(T.avg_pool2d(img, 2)).sum()),
        ("bilinear_sample", [feat, xy], lambda: T.square(T.bilinear_sample(feat, xy)).sum()),
        ("l1_loss", [kink_free], lambda: T.l1_loss(kink_free, np.zeros((3, 4)))),
        ("rot6d", [r6], lambda: T.mul(rot6d_to_matrix(r6),
                                      np.arange(36, dtype=np.float32).reshape(4, 3, 3) / 10).sum()),
    ]


def _composed_cases(seed):
    r = np.random.default_rng(seed)
    pose = as_leaf(matrix_to_rot6d(Rotation.random(16, random_state=seed).as_matrix())[None], "pose")
    beta = as_leaf(r.normal(size=(1, 10)), "beta")
    wj = r.normal(size=(1, 21, 3)).astype(np.float32)
    wv = r.normal(size=(1, TREE.n_vertices, 3)).astype(np.float32)

    def hand():
        p = pose_hand(TREE, pose, beta)
        v = skin_mesh(TREE, p.joints, p.global_rots, p.rest_joints)
        return T.add(T.mul(p.joints, wj).sum(), T.mul(v, wv).sum())

    model = runs.build_model(RunConfig(seed=seed))
    data = generate_dataset(build_taxonomy(seed), n_per_fine=2, seed=seed)
    batch = stack_batch(data["train"][:2])
    names = [n for n in model.store.names() if not n.startswith("guide.gate")]
    chosen = {n: model.store[n] for n in r.choice(names, size=10, replace=False)}

    def total():
        return compute_losses(model(batch["image"]), batch, conv=model.volume_conv).total

    return [("FK + skinning", {"pose": pose, "beta": beta}, hand),
            ("end-to-end total loss", chosen, total)]


def test_gradient_suite():
    start = time.time()
    worst_op, worst_comp, failures = 0.0, 0.0, []
    for seed in SEEDS:
        for name, leaves, fn in _op_cases(np.random.default_rng(seed)):
            rep = grad_check(fn, leaves, tol=1e-3, step=1e-6, dtype=np.float64, seed=seed)
            worst_op = max(worst_op, rep.worst)
            if not rep.passed:
                failures.append(f"{name}@{seed}")
        for name, leaves, fn in _composed_cases(seed):
            rep = grad_check(fn, leaves, tol=1e-2, step=1e-6, max_probes=8, dtype=np.float64, seed=seed)
            worst_comp = max(worst_comp, rep.worst)
            if not rep.passed:
                failures.append(f"{name}@{seed}")
    elapsed = time.time() - start
    ok = not failures and elapsed < 120
    acceptance_line("gradient suite", ok,
                    f"worst per-op {worst_op:.1e} (<1e-3), worst composed {worst_comp:.1e} (<1e-2), "
                    f"{len(SEEDS)} seeds, {elapsed:.0f} s (<120 s)" + (f", failed {failures}" if failures else ""))
    assert ok


# ---------------------------------------------------------------- 2. rotations and kinematics

def test_rotation_kinematics_suite():
    r = np.random.default_rng(0)
    raw = r.normal(size=(1000, 6))
    mats = rot6d_to_matrix(raw).data.astype(np.float64)
    ortho = np.abs(np.einsum("nji,njk->nik", mats, mats) - np.eye(3)).max()
    det = np.abs(np.linalg.det(mats) - 1).max()

    equiv, bones = 0.0, 0.0
    for seed in range(5):
        pose = matrix_to_rot6d(Rotation.random(16, random_state=seed).as_matrix())
        beta = r.normal(size=10).clip(-3, 3)
        pose[0] = IDENTITY_6D
        base, _ = hand_forward_np(TREE, pose, beta)
        rot = Rotation.random(random_state=100 + seed).as_matrix()
        pose[0] = matrix_to_rot6d(rot)
        moved, _ = hand_forward_np(TREE, pose, beta)
        equiv = max(equiv, np.abs(moved - base @ rot.T).max())
        lengths = np.linalg.norm(moved[1:] - moved[TREE.parent[1:]], axis=1)
        bones = max(bones, np.abs(lengths - np.linalg.norm(apply_shape(TREE, beta).data[1:], axis=1)).max())
    ok = ortho < 1e-6 and det < 1e-6 and equiv < 1e-4 and bones < 1e-4
    acceptance_line("rotation/kinematics suite", ok,
                    f"|R^T R - I| {ortho:.1e}, |det - 1| {det:.1e} over 1000 inputs; "
                    f"root equivariance {equiv:.1e} mm, bone length {bones:.1e} mm")
    assert ok


# ---------------------------------------------------------------- 3. soft-argmax

def test_soft_argmax_suite():
    r = np.random.default_rng(0)
    vols = r.normal(0, 10, size=(50, 8, 4, 4))
    flat = vols.reshape(50, -1)
    prob = T.softmax(flat, axis=-1).data
    norm = np.abs(prob.sum(-1) - 1).max()
    xyz = soft_argmax_3d(vols).data
    bounded = bool(np.all(xyz >= 0) and np.all(xyz <= [3, 3, 7]))
    centre = np.abs(soft_argmax_3d(np.zeros((16, 16, 16))).data - 7.5).max()
    peak = np.zeros((8, 8, 8))
    peak[7, 5, 3] = 1.0
    delta = np.abs(soft_argmax_3d(peak, scale=50).data - [3, 5, 7]).max()
    ok = norm < 1e-6 and bounded and centre < 1e-5 and delta < 1e-3
    acceptance_line("soft-argmax suite", ok,
                    f"normalization {norm:.1e}, bounded {bounded}, uniform-centre error {centre:.1e}, "
                    f"delta-limit error {delta:.1e} (<1e-3)")
    assert ok


# ---------------------------------------------------------------- 4. schedule and weights

def test_schedule_and_weights():
    alphas = tuple(alpha_schedule(e) for e in (0, 10, 20, 30, 40, 50))
    weights = tuple(float(w) for w in LossWeights().as_vector())
    r = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        w = LossWeights(*r.uniform(0, 20, size=8))
        pred = {k: T.Tensor(r.normal(size=s).astype(np.float32)) for k, s in
                (("theta", (2, 16, 6)), ("beta", (2, 10)), ("xyz_25d", (2, 21, 3)),
                 ("joints_cam_mm", (2, 21, 3)), ("mano_joints_mm", (2, 21, 3)))}
        gt = {"gt_pose6d": np.tile(IDENTITY_6D, (2, 16, 1)), "gt_shape": np.zeros((2, 10)),
              "gt_joints_mm": r.normal(size=(2, 21, 3)) * 30, "gt_25d": r.normal(size=(2, 21, 3))}
        rep = compute_losses(pred, gt, w)
        hand = sum(getattr(w, k) * rep.values()[k] for k in TERMS)
        worst = max(worst, abs(rep.total.item() - hand) / max(abs(hand), 1e-12))
    ok = (alphas == (0.1, 0.22, 0.34, 0.46, 0.5, 0.5)
          and weights == (2, 0.5, 20, 20, 0.05, 0.5, 0.5, 10) and worst < 1e-6)
    acceptance_line("schedule and weights", ok,
                    f"alpha {alphas}, weights {weights}, weighted-total rel. error {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- shared training runs

@pytest.fixture(scope="session")
def seed_runs():
    out = {}
    for seed in SEEDS:
        t0 = time.time()
        cfg = RunConfig(seed=seed, train_epochs=ABLATION_EPOCHS)
        data = runs.make_dataset(cfg)
        stage1 = runs.run_pretrain(cfg, data["train"], data["val"])
        out[seed] = {"cfg": cfg, "data": data, "stage1": stage1, "seconds": time.time() - t0}
    return out


@pytest.mark.slow
def test_silhouette_pretrained_beats_random(seed_runs):
    scores = {}
    for seed, run in seed_runs.items():
        cfg, test = run["cfg"], run["data"]["test"]
        labels = np.array([s.coarse for s in test])
        store, enc, heads = runs.build_stage1(cfg)
        g_rand, _, _ = embed(enc, heads, test)
        for name, t in store.items():
            t.data[...] = run["stage1"].arrays[name]
        g_pre, _, _ = embed(enc, heads, test)
        scores[seed] = (silhouette_score(g_rand, labels), silhouette_score(g_pre, labels))
    wins = sum(pre > rand for rand, pre in scores.values())
    detail = ", ".join(f"seed {s}: {p:.3f} vs {r:.3f}" for s, (r, p) in scores.items())
    acceptance_line("representation (silhouette)", wins == len(SEEDS),
                    f"pretrained vs random coarse silhouette on test, {detail}; {wins}/{len(SEEDS)} seeds")
    assert wins == len(SEEDS)


@pytest.mark.slow
def test_ablation_direction(seed_runs):
    variants = {"full": {}, "no-pt": {"no_pretrain": True}, "no-guidance": {"no_guidance": True}}
    scores = {k: [] for k in variants}
    seconds = sum(r["seconds"] for r in seed_runs.values())
    for seed, run in seed_runs.items():
        for name, flags in variants.items():
            t0 = time.time()
            model, _ = runs.run_train(replace(run["cfg"], **flags), run["data"]["train"],
                                      run["data"]["val"], run["stage1"].arrays)
            scores[name].append(evaluate(model, run["data"]["test"]).mpjpe_mm)
            seconds += time.time() - t0
    means = {k: float(np.mean(v)) for k, v in scores.items()}
    ok = means["full"] < means["no-pt"] and means["full"] <= means["no-guidance"] and seconds < 1800
    per_seed = "; ".join(f"{k} {[round(x, 3) for x in v]}" for k, v in scores.items())
    acceptance_line("ablation direction", ok,
                    f"mean test MPJPE full {means['full']:.3f} / no-pt {means['no-pt']:.3f} / "
                    f"no-guidance {means['no-guidance']:.3f} mm ({per_seed}); "
                    f"{seconds / 60:.1f} min (<30)")
    assert ok


@pytest.mark.slow
def test_trainability(seed_runs):
    firsts = {}
    for seed, run in seed_runs.items():
        hits = [row[0] + 1 for row in run["stage1"].rows if row[5] >= 0.9]
        firsts[seed] = hits[0] if hits else None
    stage1_ok = all(v is not None and v <= 50 for v in firsts.values())
    cfg = RunConfig(seed=0, train_epochs=300, no_pretrain=True)
    subset = seed_runs[0]["data"]["train"][:32]
    model, _ = runs.run_train(cfg, subset, subset)
    err = evaluate(model, subset).mpjpe_mm
    ok = stage1_ok and err < 5.0
    acceptance_line("trainability", ok,
                    f"32-sample overfit train MPJPE after 300 epochs {err:.3f} mm (<5); "
                    f"stage-1 epochs to >= 90% val coarse accuracy per seed {firsts} (<= 50)")
    assert ok


# ---------------------------------------------------------------- 8. engineering

def test_engineering(tmp_path):
    r = np.random.default_rng(0)
    store = ParamStore()
    GestureEncoder(store, EncoderConfig(), r)
    ClassifierHeads(store, 64, 6, 10, r)
    arrays = {k: v.data for k, v in store.items()}
    save_checkpoint(tmp_path / "a.ckpt", arrays, "stage1", {"seed": "0"})
    _, back = load_checkpoint(tmp_path / "a.ckpt")
    bit_exact = back.keys() == arrays.keys() and all(back[k].tobytes() == arrays[k].tobytes() for k in arrays)

    tax = build_taxonomy(4)
    files = []
    for i in range(2):
        ds = generate_dataset(tax, n_per_fine=5, seed=4)
        write_dataset(ds["train"] + ds["val"] + ds["test"], tmp_path / f"d{i}.jsonl")
        files.append((tmp_path / f"d{i}.jsonl").read_bytes())
    deterministic = files[0] == files[1]

    model = runs.build_model(RunConfig(seed=1, no_guidance=True))
    img = generate_dataset(tax, n_per_fine=1, seed=1)["train"][0].image[None]
    outs = []
    for scale in (0.0, 50.0):
        logits = (r.normal(size=(1, 6)) * scale, r.normal(size=(1, 10)) * scale)
        pred = model(img, use_gt_logits=logits)
        outs.append(b"".join(pred[k].data.tobytes() for k in
                             ("theta", "beta", "xyz_25d", "mano_joints_mm", "vertices_mm")))
    independent = outs[0] == outs[1]
    ok = bit_exact and deterministic and independent
    acceptance_line("engineering", ok,
                    f"checkpoint bit-exact {bit_exact}, dataset deterministic {deterministic}, "
                    f"--no-guidance independent of logits {independent}")
    assert ok
