import math

import numpy as np
import pytest

import rlpf


def water():
    x = np.array([[0.0, 0.0, 0.0], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]])
    return rlpf.Molecule(["O", "H", "H"], x)


def test_molecule_and_xyz_round_trip():
    m = water()
    assert m.atom_count == 3
    assert m.symbols == ["O", "H", "H"]
    back = rlpf.read_xyz(rlpf.write_xyz(m, "w"))
    assert back.symbols == m.symbols
    np.testing.assert_allclose(back.coords, m.coords, atol=1e-9)
    assert m.padded(5).capacity == 5


def test_unknown_element_raises():
    with pytest.raises(rlpf.Error):
        rlpf.Molecule(["Xe"], np.zeros((1, 3)))


def test_schedule_identities():
    s = rlpf.make_schedule(100)
    a, sg = np.array(s.alphas), np.array(s.sigmas)
    np.testing.assert_allclose(a**2 + sg**2, 1.0, atol=1e-12)
    alpha, sigma, _ = rlpf.transition(s, 50, 49)
    assert abs(alpha * s.alpha(49) - s.alpha(50)) < 1e-12
    with pytest.raises(rlpf.Error):
        rlpf.make_schedule(1)


def test_forces_and_rewards():
    data = rlpf.generate_dataset(4, 3, 5, seed=3)
    assert len(data) == 4
    e, f = rlpf.energy_forces(data[0])
    assert f.shape == (data[0].capacity, 3)
    np.testing.assert_allclose(f.sum(axis=0), 0.0, atol=1e-9)
    r = rlpf.force_reward(data[0])
    assert not r.penalty and r.value <= 0.0 and r.kind == "force"
    lone = rlpf.Molecule(["C"], np.zeros((1, 3)))
    assert rlpf.force_reward(lone).value == -5.0
    assert rlpf.valency_reward(lone).value == 0.0


def test_logp_and_ppo():
    z = np.array([[0.7]])
    assert rlpf.masked_logp(z, np.zeros((1, 1)), 0.7, [1]) == -0.5
    r = rlpf.ppo_objective([1.5], [1.0], 0.2)
    assert math.isclose(r["objective"], 1.2) and r["grad_logp"] == [0.0]


def test_denoiser_equivariance():
    p = rlpf.init_params(2, 16, seed=1)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 7))
    z[:, :3] -= z[:, :3].mean(axis=0)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    zr = z.copy()
    zr[:, :3] = z[:, :3] @ q.T
    ex, eh = rlpf.denoise(p, z, 0.5, [1] * 5)
    rx, rh = rlpf.denoise(p, zr, 0.5, [1] * 5)
    np.testing.assert_allclose(ex @ q.T, rx, atol=1e-10)
    np.testing.assert_allclose(eh, rh, atol=1e-10)


def test_tiny_pipeline(tmp_path):
    data = rlpf.generate_dataset(24, 3, 4, seed=5)
    ck = rlpf.pretrain(data, layers=1, hidden=8, steps=10, iterations=30, batch=8, holdout=4, seed=1)
    path = str(tmp_path / "p.ckpt")
    ck.save(path)
    assert rlpf.load_checkpoint(path).params.digest == ck.params.digest
    mols = rlpf.sample(ck, 4, seed=2)
    assert len(mols) == 4
    report = rlpf.evaluate(mols)
    assert 0.0 <= report["validity"] <= 1.0
    final, rows = rlpf.finetune(ck, epochs=2, K=4, lr=1e-3, minibatch=8, seed=3, stop_on_convergence=False)
    assert len(rows) == 2 and final.epoch == 2
    again, rows2 = rlpf.finetune(ck, epochs=2, K=4, lr=1e-3, minibatch=8, seed=3, workers=2,
                                 stop_on_convergence=False)
    assert again.params.digest == final.params.digest
    assert rows == rows2
