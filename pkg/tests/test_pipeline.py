import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from gpinv.config import ConfigError, ExperimentConfig
from gpinv.data import gaussian_dataset, synthetic_corpus
from gpinv.degradations import DegradationOp
from gpinv.diffusion import ddpm_loss, make_denoiser
from gpinv.flow import CouplingFlow
from gpinv.numerics import ContractError, ParamStore, RngStream, gradcheck
from gpinv.pipeline import (CompatibilityError, DenoiserModel, FlowModel, TrainingDiverged, flow_loss,
                            sample_posterior, train_ddpm, train_flow)
from gpinv.toy import loglog_slope, toy_config

MEAN = DegradationOp("linear-matrix", (2,), matrix=torch.tensor([[0.5, 0.5]]))


def small_toy(**kw):
    items = [f"training.{k}={v}" for k, v in kw.items()]
    return toy_config("0.5,0.5", 0.1, ["training.flow_iters=60", "training.ddpm_iters=60",
                                       "training.flow_batch=64", "training.ddpm_batch=64",
                                       "training.log_every=20", "diffusion.T=50",
                                       "diffusion.hidden=16"] + items)


def test_flow_loss_examples():
    flow = CouplingFlow((2,), 1, n_layers=4, hidden=8, rng=RngStream(0, 1))
    assert flow_loss(torch.tensor([[1.0, 3.0]]), flow, MEAN, sigma=1.0).item() == pytest.approx(5.0)
    for c in (0.0, 0.7, -2.5):
        x = torch.tensor([[c, c]])
        assert flow_loss(x, flow, MEAN, sigma=1.0).item() == pytest.approx(c * c / 2)


def test_flow_loss_batch_mean():
    flow = CouplingFlow((2,), 1, n_layers=4, hidden=8, rng=RngStream(0, 1))
    x = torch.tensor([[1.0, 3.0], [2.0, 2.0]])
    assert flow_loss(x, flow, MEAN, sigma=1.0).item() == pytest.approx((5.0 + 2.0) / 2)


def _randomized_flow(n=4, m=1):
    flow = CouplingFlow((n,), m, n_layers=4, hidden=6, rng=RngStream(0, 1)).double()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for p in flow.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.3)
    return flow


def test_flow_loss_gradcheck_on_4d_toy():
    flow = _randomized_flow()
    op = DegradationOp("linear-matrix", (4,), matrix=torch.tensor([[0.25, 0.25, 0.25, 0.25]]))
    x = torch.randn(5, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))

    def loss(p):
        return flow_loss(x, lambda v: functional_call(flow, dict(p), (v,)), op, sigma=0.3)

    rep = gradcheck(loss, ParamStore.from_module(flow), eps=1e-4, tol=1e-3)
    assert rep.passed, rep.failures[:3]


def test_train_flow_rejects_empty_dataset():
    with pytest.raises(ContractError):
        train_flow(small_toy(), np.zeros((0, 2), dtype=np.float32))
    with pytest.raises(ContractError):
        train_ddpm(small_toy(), None, np.zeros((0, 2), dtype=np.float32))


def test_config_rejects_bad_sigma_and_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("", ["training.sigma=0"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[training]\nsigmaa = 0.1\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text("[nonsense]\n")


def test_divergence_aborts_and_keeps_last_good_checkpoint(tmp_path):
    cfg = small_toy(sigma=1e-30)
    with pytest.raises(TrainingDiverged) as info:
        train_flow(cfg, gaussian_dataset(256, 2), checkpoint_path=tmp_path / "f.ckpt")
    assert "iteration 1" in str(info.value)
    assert FlowModel.load(tmp_path / "f.ckpt").flow.in_shape == (2,)


def test_training_is_deterministic(tmp_path):
    data = gaussian_dataset(1000, 2)
    a = train_flow(small_toy(), data, tmp_path / "a.ckpt", tmp_path / "a.csv")
    b = train_flow(small_toy(), data, tmp_path / "b.ckpt", tmp_path / "b.csv")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    da = train_ddpm(small_toy(), a, data, tmp_path / "da.ckpt", tmp_path / "da.csv")
    train_ddpm(small_toy(), b, data, tmp_path / "db.ckpt", tmp_path / "db.csv")
    assert (tmp_path / "da.ckpt").read_bytes() == (tmp_path / "db.ckpt").read_bytes()
    assert (tmp_path / "da.csv").read_text() == (tmp_path / "db.csv").read_text()
    c = train_flow(small_toy(seed=1), data)
    assert c.metrics.to_csv() != a.metrics.to_csv()
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "iter,loss,fit_mse,z_mean,z_var,logdet,grad_norm,lr"
    assert (tmp_path / "da.csv").read_text().splitlines()[0] == "iter,loss,loss_ema,lr"


def test_checkpoint_roundtrip_reproduces_samples(tmp_path):
    data = gaussian_dataset(1000, 2)
    fm = train_flow(small_toy(), data, tmp_path / "f.ckpt")
    dm = train_ddpm(small_toy(), fm, data, tmp_path / "d.ckpt")
    y = torch.tensor([[0.3], [-1.0], [2.0]])
    before = sample_posterior(y, fm, dm, seed=3).x
    fm2, dm2 = FlowModel.load(tmp_path / "f.ckpt"), DenoiserModel.load(tmp_path / "d.ckpt")
    after = sample_posterior(y, fm2, dm2, seed=3).x
    assert torch.equal(before, after)
    assert torch.equal(after, sample_posterior(y, fm2, dm2, seed=3).x)
    assert not torch.equal(after, sample_posterior(y, fm2, dm2, seed=4).x)
    fm2.save(tmp_path / "f2.ckpt")
    assert (tmp_path / "f2.ckpt").read_bytes() == (tmp_path / "f.ckpt").read_bytes()
    with pytest.raises(CompatibilityError):
        FlowModel.load(tmp_path / "d.ckpt")


def test_sample_posterior_contract(tmp_path):
    data = gaussian_dataset(500, 2)
    fm = train_flow(small_toy(), data)
    dm = train_ddpm(small_toy(), fm, data)
    y = torch.tensor([[1.0]])
    assert sample_posterior(y, fm, dm, n_steps=1).nfe == 2
    assert sample_posterior(y, fm, dm).nfe == 51
    with pytest.raises(ContractError):
        sample_posterior(y, fm, dm, n_steps=51)
    with pytest.raises(ContractError):
        sample_posterior(torch.zeros(1, 2), fm, dm)


def test_incompatible_shapes_are_named():
    data = gaussian_dataset(500, 2)
    fm = train_flow(small_toy(), data)
    other = toy_config("1,0,0", 0.1, ["problem.in_shape=3", "training.ddpm_iters=5"])
    with pytest.raises(CompatibilityError, match=r"\(2,\).*\(3,\)"):
        train_ddpm(other, fm, gaussian_dataset(100, 3))


def test_ddpm_smoke_and_zero_predictor_start():
    data = gaussian_dataset(5000, 2)
    fm = train_flow(small_toy(), data)
    cfg = small_toy(ddpm_iters=100, log_every=10, ddpm_lr=3e-3)
    dm = train_ddpm(cfg, fm, data)
    ema = dm.metrics.column("loss_ema")
    assert np.all(np.isfinite(dm.metrics.column("loss")))
    assert ema[-1] < ema[0]
    # freshly initialized denoiser outputs zero, so the loss is ||eps||^2 = dim(z)
    net = make_denoiser((1,), (1,), hidden=16, rng=RngStream(0, 1))
    z0, y = torch.randn(4000, 1), torch.randn(4000, 1)
    loss = ddpm_loss(z0, y, net, dm.schedule, rng=RngStream(0, 3)).item()
    assert loss == pytest.approx(1.0, abs=4 * math.sqrt(2 / 4000))


def test_image_pipeline_smoke(tmp_path):
    cfg = ExperimentConfig.from_text("", [
        "problem.kind=image", "problem.degradation=bicubic-downsample", "problem.in_shape=1x16x16",
        "problem.scale=4", "flow.layers=2", "flow.hidden=8", "diffusion.hidden=8", "diffusion.T=20",
        "training.flow_iters=5", "training.ddpm_iters=5", "training.flow_batch=4",
        "training.ddpm_batch=4", "training.sigma=0.05", "training.log_every=5"])
    data = synthetic_corpus(8, 0, size=16)
    fm = train_flow(cfg, data, tmp_path / "f.ckpt")
    dm = train_ddpm(cfg, fm, data, tmp_path / "d.ckpt")
    y = fm.degradation(torch.rand(2, 1, 16, 16))
    res = sample_posterior(y, FlowModel.load(tmp_path / "f.ckpt"), DenoiserModel.load(tmp_path / "d.ckpt"), 5)
    assert res.x.shape == (2, 1, 16, 16) and res.z0.shape == (2, 15, 4, 4) and res.nfe == 6


# default-budget toy runs, shared with the acceptance module through conftest

def test_toy_flow_fit_and_pushforward(toy_1_0, toy_half):
    for run in (toy_1_0, toy_half):
        assert run.fit_mse <= 3 * 0.05 ** 2
        assert abs(run.z_mean) <= 0.1 and 0.8 <= run.z_var <= 1.2
        assert abs(run.yz_corr) < 0.1


def test_toy_denoiser_beats_zero_predictor(toy_1_0):
    dm = toy_1_0.denoiser_model
    assert dm.metrics.column("loss_ema")[-1] < 1.0  # dim(z) = 1


def test_toy_posterior_samples_at_y_equals_2(toy_1_0):
    assert abs(toy_1_0.sample_mean[0] - 2.0) < 3 * 0.05
    assert abs(toy_1_0.sample_mean[1]) < 0.1
    assert abs(toy_1_0.sample_var[1] - 1.0) < 0.25


def test_toy_full_schedule_not_worse_than_subsampled(toy_1_0):
    fm, dm = toy_1_0.flow_model, toy_1_0.denoiser_model
    y = torch.full((10000, 1), 2.0)
    res = {}
    for n in (dm.schedule.T, dm.schedule.T // 10):
        x = sample_posterior(y, fm, dm, n_steps=n, seed=11).x.double()
        r = (x[:, 0] - 2.0) ** 2
        res[n] = (r.mean().item(), r.std().item() / math.sqrt(len(r)))
    full, sub = res[1000], res[100]
    assert full[0] <= 3 * 0.05 ** 2 and sub[0] <= 3 * 0.05 ** 2
    assert full[0] <= sub[0] + 2 * math.hypot(full[1], sub[1])


def test_sigma_halved_fit_ratio(scaling):
    # printed expectation: residual proportional to sigma^2, so ratio in [1/8, 1/2]
    ratio = scaling.fit_mse[1] / scaling.fit_mse[0]
    assert 1 / 8 <= ratio <= 1 / 2, f"fit MSE ratio {ratio:.4f} for sigma 0.1 -> 0.05"


def test_loglog_slope_helper():
    s = np.array([0.1, 0.05, 0.025])
    assert loglog_slope(s, 3 * s ** 2) == pytest.approx(2.0)
