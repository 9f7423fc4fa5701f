import numpy as np
import pytest

from poem.autodiff import evaluate, finite_diff_check
from poem.gaussian_poe import NEGLECT, DiagGaussian, PriorSpec, episode_scores, log_softmax_rows
from poem.gridworld import EMPTY, gen_maze, grid_onehot
from poem.models import (
    Decoder, DecoderConfig, Encoder, EncoderConfig, a4_log_scores, a4_probabilities, cell_accuracy,
    decoder_graph, episode_graph, load_checkpoint, proto_scores, save_checkpoint,
)
from poem.trainer import Adam

SMALL = EncoderConfig(input_dim=5, hidden=8, embed_dim=4)


def _episode(rng, ways, shots, n_q=2, width=5):
    sx = rng.normal(size=(sum(shots), width))
    qx = rng.normal(size=(ways * n_q, width))
    assign = np.zeros((ways, sum(shots)))
    start = 0
    for m, v in enumerate(shots):
        assign[m, start:start + v] = 1
        start += v
    return sx, qx, assign, np.repeat(np.arange(ways), n_q)


def test_encode_deterministic_and_positive():
    enc = Encoder.init(SMALL, 0)
    x = np.random.default_rng(0).normal(size=(6, 5))
    a = enc.encode(x)
    b = enc.encode(x)
    assert all(np.array_equal(p.mean, q.mean) and np.array_equal(p.precision, q.precision) for p, q in zip(a, b))
    extreme = enc.encode(np.array([[1e3] * 5, [-1e3] * 5]))
    assert all((g.precision >= 1e-6).all() for g in extreme)


def test_encoder_finite_on_box():
    enc = Encoder.init(EncoderConfig(input_dim=5), 1)
    mu, tau = enc.encode_arrays(np.random.default_rng(1).uniform(-10, 10, size=(200, 5)))
    assert np.isfinite(mu).all() and np.isfinite(tau).all()


def test_initial_precision_near_one():
    enc = Encoder.init(EncoderConfig(input_dim=5), 2)
    _, tau = enc.encode_arrays(np.random.default_rng(2).normal(size=(50, 5)))
    assert abs(np.median(tau) - 1.0) < 0.2


def test_width_mismatch():
    enc = Encoder.init(SMALL, 0)
    with pytest.raises(ValueError):
        enc.encode(np.zeros((1, 6)))
    dec = Decoder.init(DecoderConfig(embed_dim=4), 0)
    with pytest.raises(ValueError):
        dec.decode(np.zeros(5))


def test_heads_share_only_backbone():
    enc = Encoder.init(SMALL, 0)
    assert not set(enc.names(precision=False)) ^ {k for k in enc.params if not k.startswith("precision.")}
    protonet = Encoder.init(SMALL, 0)
    for k in protonet.names(precision=False):
        np.testing.assert_array_equal(enc.params[k], protonet.params[k])


@pytest.mark.parametrize("point", range(3))
@pytest.mark.parametrize("prior", [NEGLECT, PriorSpec("gaussian", precision=0.5)], ids=["neglect", "gaussian"])
def test_full_poem_loss_gradient(point, prior):
    rng = np.random.default_rng(point)
    enc = Encoder.init(SMALL, 10 + point)
    for v in enc.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    sx, qx, assign, targets = _episode(rng, 3, [2, 3, 1])
    eg = episode_graph(enc, sx, qx, assign, targets, prior=prior)
    assert finite_diff_check(eg.graph, eg.loss, list(eg.params.values())) < 1e-4


def test_protonet_loss_gradient():
    rng = np.random.default_rng(7)
    enc = Encoder.init(SMALL, 7)
    sx, qx, assign, targets = _episode(rng, 3, [2, 2, 2])
    eg = episode_graph(enc, sx, qx, assign, targets, method="protonet")
    assert finite_diff_check(eg.graph, eg.loss, list(eg.params.values())) < 1e-4


def test_proto_scores_basic():
    supports = [np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([[5.0, 5.0]])]
    assert np.argmax(proto_scores(supports, np.array([1.0, 0.0]))) == 0
    equi = [np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]]), np.array([[0.0, 1.0]])]
    s = proto_scores(equi, np.zeros(2))
    np.testing.assert_allclose(np.exp(log_softmax_rows(s[None]))[0], 1 / 3)


def test_proto_scores_match_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        supports = [rng.normal(size=(int(rng.integers(1, 5)), 6)) for _ in range(4)]
        q = rng.normal(size=6)
        ref = []
        for s in supports:
            proto = [sum(s[i, d] for i in range(len(s))) / len(s) for d in range(6)]
            ref.append(-sum((q[d] - proto[d]) ** 2 for d in range(6)))
        np.testing.assert_allclose(proto_scores(supports, q), ref, rtol=0, atol=1e-12)


def test_poem_unit_precision_equals_closed_form():
    rng = np.random.default_rng(4)
    for _ in range(100):
        dim = int(rng.integers(1, 6))
        shots = rng.integers(1, 7, size=int(rng.integers(2, 6)))
        supports = [rng.normal(size=(v, dim)) for v in shots]
        q = rng.normal(size=dim)
        sets = [[DiagGaussian(r, np.ones(dim)) for r in s] for s in supports]
        scores = episode_scores(sets, [DiagGaussian(q, np.ones(dim))]).probabilities()[0]
        np.testing.assert_allclose(scores, a4_probabilities(supports, q), rtol=0, atol=1e-9)


def test_equal_shots_argmax_matches_protonet():
    rng = np.random.default_rng(5)
    for _ in range(100):
        v = int(rng.integers(1, 8))
        supports = [rng.normal(size=(v, 8)) for _ in range(5)]
        q = rng.normal(size=8)
        assert np.argmax(a4_probabilities(supports, q)) == np.argmax(proto_scores(supports, q))


def test_large_shots_limit():
    # with every V scaled up, the unit-precision log scores approach proto scores / 2 up to a constant
    rng = np.random.default_rng(6)
    protos = rng.normal(size=(3, 4))
    q = rng.normal(size=4)
    gaps = []
    for v in (10, 1000, 100000):
        supports = [np.repeat(p[None], v, axis=0) for p in protos]
        diff = a4_log_scores(supports, q) - 0.5 * proto_scores(supports, q)
        gaps.append(np.ptp(diff))
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-4


def test_fixed_unit_graph_loss_equals_closed_form():
    rng = np.random.default_rng(8)
    enc = Encoder.init(SMALL, 8)
    for _ in range(10):
        shots = list(rng.integers(1, 5, size=3))
        sx, qx, assign, targets = _episode(rng, 3, shots)
        eg = episode_graph(enc, sx, qx, assign, targets, precision_mode="fixed_unit")
        loss = evaluate(eg.graph)[eg.loss]
        mu_s, _ = enc.encode_arrays(sx, precision=False)
        mu_q, _ = enc.encode_arrays(qx, precision=False)
        supports = [mu_s[assign[m] > 0] for m in range(3)]
        logp = np.stack([a4_log_scores(supports, q) for q in mu_q])
        ref = -np.mean(log_softmax_rows(logp)[np.arange(len(targets)), targets])
        assert abs(loss - ref) < 1e-9


def test_zero_decoder():
    dec = Decoder.init(DecoderConfig(embed_dim=4), 0)
    for v in dec.params.values():
        v[:] = 0.0
    grid = gen_maze(0)
    np.testing.assert_array_equal(dec.decode(np.ones(4)), 0.0)
    g, loss, _, _ = decoder_graph(dec, np.ones((1, 4)), grid_onehot(grid).reshape(1, -1))
    assert evaluate(g)[loss] == pytest.approx(0.25)


def test_all_empty_cell_accuracy():
    grid = gen_maze(1)
    logits = np.zeros((11, 11, 4))
    logits[..., EMPTY] = 1.0
    assert cell_accuracy(logits, grid_onehot(grid)) == pytest.approx(np.mean(grid.cells == EMPTY))


def test_decoder_overfits_one_environment():
    dec = Decoder.init(DecoderConfig(embed_dim=8, hidden=64), 0)
    z = np.random.default_rng(0).normal(size=(1, 8))
    target = grid_onehot(gen_maze(3)).reshape(1, -1)
    opt = Adam(1e-3)
    from poem.autodiff import gradient
    for _ in range(600):
        g, loss, _, params = decoder_graph(dec, z, target)
        values = evaluate(g)
        grads = gradient(g, values, loss, list(params.values()))
        opt.step(dec.params, {k: grads[n] for k, n in params.items()})
    assert values[loss] < 1e-3


@pytest.mark.parametrize("point", range(3))
def test_decoder_gradient(point):
    rng = np.random.default_rng(point)
    dec = Decoder.init(DecoderConfig(embed_dim=3, hidden=6, height=3, width=3), point)
    for v in dec.params.values():
        v += rng.normal(scale=0.2, size=v.shape)
    target = np.eye(4)[rng.integers(0, 4, size=(2, 9))].reshape(2, -1)
    g, loss, _, params = decoder_graph(dec, rng.normal(size=(2, 3)), target)
    assert finite_diff_check(g, loss, list(params.values())) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    enc = Encoder.init(SMALL, 3)
    path = save_checkpoint(tmp_path / "enc.ckpt", enc.params, SMALL.embed_dim, {"a": 1})
    params, header = load_checkpoint(path)
    assert header["embed_dim"] == 4 and len(header["config_hash"]) == 64
    for k, v in enc.params.items():
        np.testing.assert_array_equal(params[k], v)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short")
