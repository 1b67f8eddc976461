import math

import pytest
import torch

from app.exceptions import InvalidArgumentError, TrainingDivergedError
from app.models.denoiser import DTYPE, Denoiser
from app.models.schemas import DatasetSpec, EtaPolicy, PretrainConfig, NetSpec
from app.services.datasets_service import (
    GaussianMixtureDataset, UniformBoxDataset, build_dataset, smoothed_spec,
)
from app.services.generator_service import (
    draw_eta, gen_step, generate, generate_with_intermediate, generate_with_intermediate_rows,
)
from app.services.oracle_service import finite_diff_gradient
from app.services.schedule_service import alpha, forward_diffuse, make_schedule
from app.services.scorenet_service import (
    _loss_weight, bulk_posterior_error, cfg_gradient, denoise, density_ratio_gradient, eps_from_x0,
    posterior_mean_error, pretrain_denoiser, score, score_rms_error,
)
from tests.conftest import AnalyticMixtureDenoiser, one_point_denoiser


class ShiftedDenoiser(Denoiser):
    """Обертка: к выходу сети прибавляется поле, не зависящее от класса"""

    def __init__(self, base: Denoiser):
        super().__init__(base.input_dim, base.cond_classes, hidden_layers=1, width=4)
        self.base = base

    def forward(self, x, sigma, c=None):
        shift = 0.3 * torch.sin(x) + sigma * torch.tensor([0.5, -0.25], dtype=DTYPE)
        return self.base(x, sigma, c) + shift


class TestScheduleService:
    """Тесты лестниц шума и прямого процесса"""

    def test_linear_schedule(self):
        """Тест линейной лестницы K=4"""
        schedule = make_schedule(4)
        assert schedule.sigmas == (0.0, 0.25, 0.5, 0.75, 1.0)
        assert schedule.steps == 4

    def test_cosine_schedule_endpoints(self):
        """Тест точных концов косинусной лестницы"""
        schedule = make_schedule(6, "cosine")
        assert schedule.sigmas[0] == 0.0
        assert schedule.sigmas[-1] == 1.0
        assert all(b > a for a, b in zip(schedule.sigmas[:-1], schedule.sigmas[1:]))

    def test_single_step_schedule(self):
        """Тест K=1: лестница из двух уровней"""
        assert make_schedule(1).sigmas == (0.0, 1.0)

    def test_invalid_steps(self):
        """Тест ошибки при K=0"""
        with pytest.raises(InvalidArgumentError):
            make_schedule(0)

    def test_variance_preserving(self):
        """Тест α² + σ² = 1"""
        for sigma in make_schedule(8).sigmas:
            assert alpha(sigma) ** 2 + sigma ** 2 == pytest.approx(1.0, abs=1e-15)

    def test_forward_diffuse_endpoints(self):
        """Тест x_t на уровнях 0 и 1"""
        x = torch.tensor([[1.0, -2.0]], dtype=DTYPE)
        eps = torch.tensor([[0.5, 0.5]], dtype=DTYPE)
        assert torch.equal(forward_diffuse(x, 0.0, eps), x)
        assert torch.equal(forward_diffuse(x, 1.0, eps), eps)

    def test_forward_diffuse_shape_mismatch(self):
        """Тест ошибки при несовпадении размерностей"""
        with pytest.raises(InvalidArgumentError):
            forward_diffuse(torch.zeros(3, 2, dtype=DTYPE), 0.5, torch.zeros(3, 3, dtype=DTYPE))

    def test_forward_diffuse_sigma_out_of_range(self):
        """Тест ошибки при σ вне [0, 1]"""
        with pytest.raises(InvalidArgumentError):
            forward_diffuse(torch.zeros(2, dtype=DTYPE), 1.5, torch.zeros(2, dtype=DTYPE))

    def test_forward_diffuse_sample_mean(self):
        """Тест: среднее по 10^5 шумам сходится к α·x в пределах 3σ/√n"""
        n, sigma = 100_000, 0.6
        x = torch.tensor([1.5, -0.7], dtype=DTYPE).expand(n, 2)
        eps = torch.randn(n, 2, generator=torch.Generator().manual_seed(11), dtype=DTYPE)
        mean = forward_diffuse(x, sigma, eps).mean(dim=0)
        bound = 3 * sigma / math.sqrt(n)
        assert bool(((mean - 0.8 * x[0]).abs() <= bound).all())

    def test_forward_diffuse_is_linear(self):
        """Тест линейности по x и по ε"""
        gen = torch.Generator().manual_seed(12)
        x1, x2, e1, e2 = (torch.randn(6, 3, generator=gen, dtype=DTYPE) for _ in range(4))
        a, b = 0.7, -1.3
        for sigma in (0.0, 0.35, 0.8, 1.0):
            combined = forward_diffuse(a * x1 + b * x2, sigma, a * e1 + b * e2)
            separate = a * forward_diffuse(x1, sigma, e1) + b * forward_diffuse(x2, sigma, e2)
            assert torch.allclose(combined, separate, atol=1e-13)


class TestDatasetsService:
    """Тесты синтетических распределений"""

    def test_mixture_sample_shapes(self, mixture_dataset):
        """Тест форм выборки и меток"""
        x, labels = mixture_dataset.sample(50, torch.Generator().manual_seed(0))
        assert x.shape == (50, 2)
        assert labels.shape == (50,)
        assert set(labels.tolist()) <= {0, 1}

    def test_point_posterior_mean_is_point(self):
        """Тест E[x0 | x_t] одноточечного распределения"""
        dataset = build_dataset(DatasetSpec(name="point", centers=[[1.5, -0.5]]))
        x_t = torch.randn(10, 2, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        mean = dataset.posterior_mean(x_t, 0.7)
        assert torch.equal(mean, torch.tensor([[1.5, -0.5]] * 10, dtype=DTYPE))

    def test_standard_normal_quantities(self):
        """Тест score -x_t и E[x0 | x_t] = α·x_t для N(0, I)"""
        dataset = build_dataset(DatasetSpec(name="gaussian", centers=[[0.0, 0.0]], std=1.0))
        x_t = torch.randn(20, 2, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
        assert torch.allclose(dataset.marginal_score(x_t, 0.6), -x_t, atol=1e-12)
        assert torch.allclose(dataset.posterior_mean(x_t, 0.6), 0.8 * x_t, atol=1e-12)

    def test_point_has_no_density(self):
        """Тест ошибки log_prob для точечной массы"""
        dataset = build_dataset(DatasetSpec(name="point", centers=[[0.0, 0.0]]))
        with pytest.raises(InvalidArgumentError):
            dataset.log_prob(torch.zeros(1, 2, dtype=DTYPE))

    def test_mixture_log_prob_at_center(self, mixture_dataset):
        """Тест аналитической плотности смеси в центре компоненты"""
        value = mixture_dataset.log_prob(torch.tensor([[1.0, 0.0]], dtype=DTYPE)).item()
        comp = -math.log(2 * math.pi * 0.09)
        far = comp - 4.0 / (2 * 0.09)
        expected = math.log(0.5 * math.exp(comp) + 0.5 * math.exp(far))
        assert value == pytest.approx(expected, rel=1e-12)

    def test_uniform_log_prob(self):
        """Тест плотности равномерного распределения внутри и вне куба"""
        dataset = build_dataset(DatasetSpec(name="uniform", low=-2, high=2))
        assert isinstance(dataset, UniformBoxDataset)
        values = dataset.log_prob(torch.tensor([[0.0, 1.0], [3.0, 0.0]], dtype=DTYPE))
        assert values[0].item() == pytest.approx(-2 * math.log(4.0))
        assert values[1].item() == -math.inf

    def test_support_distance(self):
        """Тест расстояния до носителя равномерных данных"""
        dataset = build_dataset(DatasetSpec(name="uniform", low=-2, high=2))
        distance = dataset.support_distance(torch.tensor([[0.0, 0.0], [5.0, 2.0]], dtype=DTYPE))
        assert distance.tolist() == [0.0, 3.0]

    def test_smoothed_spec_composes(self):
        """Тест сложения дисперсий при повторном размытии"""
        spec = DatasetSpec(name="mixture", centers=[[0.0, 0.0]], std=0.1)
        twice = smoothed_spec(smoothed_spec(spec, 0.3), 0.4)
        assert twice.smoothing == pytest.approx(0.5)
        assert GaussianMixtureDataset(twice).std == pytest.approx(math.sqrt(0.01 + 0.25))

    def test_class_posterior_gradient_sums_to_zero(self, mixture_dataset):
        """Тест Σ_c p(c|x_t)·∇ log p(c|x_t) = 0"""
        x_t = torch.randn(8, 2, generator=torch.Generator().manual_seed(3), dtype=DTYPE)
        resp = mixture_dataset.responsibilities(x_t, 0.5)
        total = sum(resp[:, c:c + 1] * mixture_dataset.class_posterior_gradient(x_t, 0.5, c) for c in range(2))
        assert torch.allclose(total, torch.zeros_like(total), atol=1e-12)


class TestScorenetService:
    """Тесты денойзера, score и градиентов неявных наград"""

    def test_eps_from_x0_needs_positive_sigma(self):
        """Тест ошибки перехода к ε при σ=0"""
        x = torch.zeros(2, 2, dtype=DTYPE)
        with pytest.raises(InvalidArgumentError):
            eps_from_x0(x, 0.0, x)

    def test_score_is_scaled_residual(self, small_net):
        """Тест score = -ε_θ/σ на случайных входах и уровнях"""
        gen = torch.Generator().manual_seed(13)
        x_t = torch.randn(9, 2, generator=gen, dtype=DTYPE)
        with torch.no_grad():
            for sigma in (0.1, 0.45, 0.9, 1.0):
                residual = eps_from_x0(x_t, sigma, denoise(small_net, x_t, sigma))
                assert torch.allclose(score(small_net, x_t, sigma), -residual / sigma, atol=1e-12)

    def test_eps_from_x0_inverts_forward(self):
        """Тест восстановления ε из точного x0"""
        gen = torch.Generator().manual_seed(4)
        x0 = torch.randn(5, 2, generator=gen, dtype=DTYPE)
        eps = torch.randn(5, 2, generator=gen, dtype=DTYPE)
        x_t = forward_diffuse(x0, 0.6, eps)
        assert torch.allclose(eps_from_x0(x_t, 0.6, x0), eps, atol=1e-12)

    def test_score_of_exact_gaussian_denoiser(self):
        """Тест score = -x_t для точного денойзера N(0, I)"""
        dataset = GaussianMixtureDataset(DatasetSpec(name="gaussian", centers=[[0.0, 0.0]], std=1.0))
        net = AnalyticMixtureDenoiser(dataset)
        x_t = torch.randn(12, 2, generator=torch.Generator().manual_seed(5), dtype=DTYPE)
        with torch.no_grad():
            assert torch.allclose(score(net, x_t, 0.3), -x_t, atol=1e-10)

    def test_condition_on_unconditional_net(self, small_net):
        """Тест ошибки условия для безусловной сети"""
        with pytest.raises(InvalidArgumentError):
            denoise(small_net, torch.zeros(2, 2, dtype=DTYPE), 0.5, c=0)

    def test_class_out_of_range(self, analytic_psi):
        """Тест ошибки номера класса вне диапазона"""
        with pytest.raises(InvalidArgumentError):
            denoise(analytic_psi, torch.zeros(2, 2, dtype=DTYPE), 0.5, c=5)

    def test_cfg_gradient_matches_class_posterior(self, analytic_psi, mixture_dataset):
        """Тест s(x_t|c) - s(x_t) = ∇ log p(c|x_t)"""
        x_t = torch.randn(16, 2, generator=torch.Generator().manual_seed(6), dtype=DTYPE)
        with torch.no_grad():
            got = cfg_gradient(analytic_psi, x_t, 0.5, 1)
        expected = mixture_dataset.class_posterior_gradient(x_t, 0.5, 1)
        assert torch.allclose(got, expected, atol=1e-10)

    def test_cfg_gradient_ignores_shared_shift(self, analytic_psi):
        """Тест: общее для условного и безусловного выхода поле сдвига не меняет CFG"""
        shifted = ShiftedDenoiser(analytic_psi)
        x_t = torch.randn(16, 2, generator=torch.Generator().manual_seed(14), dtype=DTYPE)
        with torch.no_grad():
            for c in (0, 1):
                assert torch.allclose(cfg_gradient(shifted, x_t, 0.5, c), cfg_gradient(analytic_psi, x_t, 0.5, c),
                                      atol=1e-10)
            assert not torch.allclose(score(shifted, x_t, 0.5), score(analytic_psi, x_t, 0.5))

    def test_cfg_gradient_needs_conditional_net(self, small_net):
        """Тест ошибки CFG для безусловной сети"""
        with pytest.raises(InvalidArgumentError):
            cfg_gradient(small_net, torch.zeros(1, 2, dtype=DTYPE), 0.5, 0)

    def test_density_ratio_gradient(self, mixture_dataset):
        """Тест s_A - s_B на аналитических сетях"""
        smooth = GaussianMixtureDataset(smoothed_spec(mixture_dataset.spec, 0.4))
        net_a, net_b = AnalyticMixtureDenoiser(mixture_dataset), AnalyticMixtureDenoiser(smooth)
        x_t = torch.randn(10, 2, generator=torch.Generator().manual_seed(7), dtype=DTYPE)
        with torch.no_grad():
            got = density_ratio_gradient(net_a, net_b, x_t, 0.4)
        expected = mixture_dataset.marginal_score(x_t, 0.4) - smooth.marginal_score(x_t, 0.4)
        assert torch.allclose(got, expected, atol=1e-10)

    def test_density_ratio_dimension_mismatch(self, small_net):
        """Тест ошибки при разных размерностях сетей"""
        with pytest.raises(InvalidArgumentError):
            density_ratio_gradient(small_net, Denoiser(3), torch.zeros(1, 2, dtype=DTYPE), 0.5)

    def test_exact_point_net_has_zero_error(self):
        """Тест нулевой ошибки у точного одноточечного денойзера"""
        dataset = build_dataset(DatasetSpec(name="point", centers=[[1.5, -0.5]]))
        assert posterior_mean_error(one_point_denoiser([1.5, -0.5]), dataset) == 0.0

    def test_bulk_error_of_point_nets(self, small_net):
        """Тест ошибки на массе данных: 0 у точной сети, |b - x*| у сдвинутой константы"""
        dataset = build_dataset(DatasetSpec(name="point", centers=[[1.5, -0.5]]))
        assert bulk_posterior_error(one_point_denoiser([1.5, -0.5]), dataset) == 0.0
        assert bulk_posterior_error(one_point_denoiser([1.5, -0.47]), dataset) == pytest.approx(0.03, abs=1e-12)
        assert bulk_posterior_error(small_net, dataset) > 1e-2

    def test_min_snr_weight(self):
        """Тест веса min(α²/σ² + 1, max_snr) и единичного веса по умолчанию"""
        sigma = torch.tensor([[1.0], [0.8], [0.1]], dtype=DTYPE)
        spec = DatasetSpec(name="point", centers=[[0.0, 0.0]])
        weighted = PretrainConfig(dataset=spec, loss_weighting="min_snr", max_snr=5.0)
        expected = torch.tensor([[1.0], [0.36 / 0.64 + 1.0], [5.0]], dtype=DTYPE)
        assert torch.allclose(_loss_weight(weighted, sigma), expected, atol=1e-12)
        assert torch.equal(_loss_weight(PretrainConfig(dataset=spec), sigma), torch.ones_like(sigma))

    def test_cosine_lr_anneals_to_zero(self):
        """Тест: косинусный режим доводит lr до нуля за steps шагов, постоянный - нет"""
        spec = DatasetSpec(name="point", centers=[[0.0, 0.0]])
        rates = {}
        for schedule_kind in ("cosine", "constant"):
            cfg = PretrainConfig(dataset=spec, steps=10, batch=4, lr=1e-2, lr_schedule=schedule_kind,
                                 net=NetSpec(hidden_layers=1, width=4))
            rates[schedule_kind] = pretrain_denoiser(cfg, make_schedule(2), seed=0).learning_rates
        cosine, constant = rates["cosine"], rates["constant"]
        assert len(cosine) == 10
        assert cosine[0] == pytest.approx(1e-2)
        assert all(b < a for a, b in zip(cosine[:-1], cosine[1:]))
        assert cosine[-1] == pytest.approx(1e-2 * 0.5 * (1 + math.cos(math.pi * 9 / 10)))
        assert constant == [1e-2] * 10

    def test_point_loss_windows_do_not_increase(self):
        """Тест: средние потерь по окнам в 100 шагов не растут на одноточечных данных"""
        cfg = PretrainConfig(dataset=DatasetSpec(name="point", centers=[[1.0, -1.0]]), steps=1000, batch=64,
                             lr=3e-3, net=NetSpec(hidden_layers=2, width=32))
        losses = pretrain_denoiser(cfg, make_schedule(4), seed=3).losses
        windows = [sum(losses[i:i + 100]) / 100 for i in range(0, 1000, 100)]
        assert all(b <= a for a, b in zip(windows[:-1], windows[1:]))

    def test_pretrain_reduces_loss(self):
        """Тест убывания потерь на одноточечных данных"""
        cfg = PretrainConfig(dataset=DatasetSpec(name="point", centers=[[1.0, 1.0]]), steps=150, batch=32,
                             lr=5e-3, net=NetSpec(hidden_layers=1, width=16))
        result = pretrain_denoiser(cfg, make_schedule(4), seed=0)
        assert len(result.losses) == 150
        assert sum(result.losses[-10:]) < sum(result.losses[:10])

    def test_pretrain_is_reproducible(self):
        """Тест побитовой воспроизводимости предобучения"""
        cfg = PretrainConfig(dataset=DatasetSpec(name="mixture", centers=[[-1, 0], [1, 0]], std=0.2), steps=10,
                             batch=8, conditional=True, net=NetSpec(hidden_layers=1, width=8))
        first = pretrain_denoiser(cfg, make_schedule(2), seed=11)
        second = pretrain_denoiser(cfg, make_schedule(2), seed=11)
        assert first.losses == second.losses
        for a, b in zip(first.net.state_dict().values(), second.net.state_dict().values()):
            assert torch.equal(a, b)

    def test_full_label_dropout_keeps_condition_inert(self):
        """Тест: при label_dropout=1 условная сеть равна безусловной"""
        cfg = PretrainConfig(dataset=DatasetSpec(name="mixture", centers=[[-1, 0], [1, 0]], std=0.2), steps=20,
                             batch=8, conditional=True, label_dropout=1.0, net=NetSpec(hidden_layers=1, width=8))
        net = pretrain_denoiser(cfg, make_schedule(2), seed=0).net
        x_t = torch.randn(6, 2, generator=torch.Generator().manual_seed(8), dtype=DTYPE)
        with torch.no_grad():
            assert torch.equal(denoise(net, x_t, 0.5, 1), denoise(net, x_t, 0.5))

    def test_pretrain_divergence(self, mocker):
        """Тест TrainingDivergedError при нечисловых данных"""
        nan_batch = torch.full((4, 2), float("nan"), dtype=DTYPE), torch.zeros(4, dtype=torch.long)
        mocker.patch.object(GaussianMixtureDataset, "sample", return_value=nan_batch)
        cfg = PretrainConfig(dataset=DatasetSpec(name="point", centers=[[0.0, 0.0]]), steps=3, batch=4)
        with pytest.raises(TrainingDivergedError) as exc_info:
            pretrain_denoiser(cfg, make_schedule(2), seed=0)
        assert exc_info.value.iteration == 0
        assert exc_info.value.last_state is not None

    def test_pretrain_init_mismatch(self, small_net):
        """Тест ошибки при несовместимой начальной сети"""
        cfg = PretrainConfig(dataset=DatasetSpec(name="uniform", dim=3), steps=1)
        with pytest.raises(InvalidArgumentError):
            pretrain_denoiser(cfg, make_schedule(2), seed=0, init=small_net)

    def test_score_rms_error_of_exact_net(self):
        """Тест нулевой RMS-ошибки score у аналитической сети"""
        dataset = GaussianMixtureDataset(DatasetSpec(name="gaussian", centers=[[0.0, 0.0]], std=1.0))
        assert score_rms_error(AnalyticMixtureDenoiser(dataset), dataset, 0.6) < 1e-10


class TestGeneratorService:
    """Тесты шага генератора и цепочек"""

    def test_last_step_returns_prediction(self, small_net):
        """Тест: при σ_prev = 0 шаг возвращает x0_pred"""
        x = torch.randn(4, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        eps = torch.randn(4, 2, dtype=DTYPE)
        x_prev, x0_pred = gen_step(small_net, x, 0.5, 0.0, 0.3, eps)
        assert torch.equal(x_prev, x0_pred)

    def test_eta_one_ignores_noise(self, small_net):
        """Тест: при η=1 шаг детерминирован"""
        x = torch.randn(4, 2, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        a, _ = gen_step(small_net, x, 0.75, 0.5, 1.0, torch.zeros(4, 2, dtype=DTYPE))
        b, _ = gen_step(small_net, x, 0.75, 0.5, 1.0, torch.ones(4, 2, dtype=DTYPE))
        assert torch.equal(a, b)

    def test_eta_zero_uses_fresh_noise(self, small_net):
        """Тест: при η=0 остаток равен свежему шуму"""
        x = torch.randn(3, 2, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
        eps = torch.randn(3, 2, generator=torch.Generator().manual_seed(3), dtype=DTYPE)
        x_prev, x0_pred = gen_step(small_net, x, 0.75, 0.5, 0.0, eps)
        assert torch.allclose(x_prev, math.sqrt(0.75) * x0_pred + 0.5 * eps, atol=1e-14)

    def test_pure_noise_level_uses_state_as_residual(self, small_net):
        """Тест: на уровне σ=1 остаток ε_θ = x_k"""
        z = torch.randn(3, 2, generator=torch.Generator().manual_seed(4), dtype=DTYPE)
        x_prev, x0_pred = gen_step(small_net, z, 1.0, 0.5, 1.0, torch.zeros(3, 2, dtype=DTYPE))
        assert torch.allclose(x_prev, math.sqrt(0.75) * x0_pred + 0.5 * z, atol=1e-14)

    @pytest.mark.parametrize("sigma_k,sigma_prev", [(0.0, 0.0), (0.5, 0.5), (1.2, 0.5), (0.5, -0.1)])
    def test_invalid_levels(self, small_net, sigma_k, sigma_prev):
        """Тест ошибок при неверных уровнях шума"""
        x = torch.zeros(1, 2, dtype=DTYPE)
        with pytest.raises(InvalidArgumentError):
            gen_step(small_net, x, sigma_k, sigma_prev, 1.0, x)

    def test_draw_eta(self):
        """Тест политики η: одно значение на сэмпл"""
        eta = draw_eta(EtaPolicy(mode="random"), 100, torch.Generator().manual_seed(0))
        assert eta.shape == (100, 1)
        assert bool(((eta >= 0) & (eta < 1)).all())
        fixed = draw_eta(EtaPolicy(mode="fixed", value=0.4), 5, torch.Generator())
        assert torch.equal(fixed, torch.full((5, 1), 0.4, dtype=DTYPE))

    def test_trajectory_layout(self, small_net):
        """Тест длины траектории и порядка уровней"""
        z = torch.randn(6, 2, generator=torch.Generator().manual_seed(5), dtype=DTYPE)
        traj = generate(small_net, z, make_schedule(4), EtaPolicy(), seed=1)
        assert len(traj.states) == 5
        assert traj.sigmas == [1.0, 0.75, 0.5, 0.25, 0.0]
        assert torch.equal(traj.states[0], z)
        assert torch.equal(traj.final, traj.x0_preds[-1])

    def test_noise_shape_mismatch(self, small_net):
        """Тест ошибки при неверной размерности шума"""
        with pytest.raises(InvalidArgumentError):
            generate(small_net, torch.zeros(2, 3, dtype=DTYPE), make_schedule(2), EtaPolicy())

    def test_one_point_denoiser_reduces_to_point(self):
        """Тест: η=1, K=8, точный одноточечный денойзер дает x* для любого потока ε"""
        point = [1.5, -0.5]
        net = one_point_denoiser(point)
        z = torch.randn(32, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        policy = EtaPolicy(mode="fixed", value=1.0)
        with torch.no_grad():
            first = generate(net, z, make_schedule(8), policy, seed=1)
            second = generate(net, z, make_schedule(8), policy, seed=2)
        assert torch.allclose(first.final, torch.tensor([point] * 32, dtype=DTYPE), atol=1e-10)
        for a, b in zip(first.states, second.states):
            assert torch.equal(a, b)

    def test_intermediate_prefix_is_frozen(self, small_net):
        """Тест: префикс без градиента, один дифференцируемый вызов сети"""
        z = torch.randn(4, 2, generator=torch.Generator().manual_seed(6), dtype=DTYPE)
        small_net.differentiable_calls = 0
        sample = generate_with_intermediate(small_net, z, make_schedule(4), 2, EtaPolicy(), seed=0)
        assert small_net.differentiable_calls == 1
        assert not sample.x_in.requires_grad
        assert sample.x_out.requires_grad
        assert (sample.sigma_in, sample.sigma_out) == (0.5, 0.25)

    def test_intermediate_top_step_has_no_prefix(self, small_net):
        """Тест: при k=K вход шага - сам шум z"""
        z = torch.randn(4, 2, generator=torch.Generator().manual_seed(7), dtype=DTYPE)
        sample = generate_with_intermediate(small_net, z, make_schedule(3), 3, EtaPolicy(), seed=0)
        assert torch.equal(sample.x_in, z)

    def test_intermediate_matches_full_chain(self, small_net):
        """Тест: при общем потоке ГСЧ k=1 воспроизводит конец полной цепочки"""
        z = torch.randn(4, 2, generator=torch.Generator().manual_seed(8), dtype=DTYPE)
        with torch.no_grad():
            full = generate(small_net, z, make_schedule(3), EtaPolicy(), seed=9)
            sample = generate_with_intermediate(small_net, z, make_schedule(3), 1, EtaPolicy(), seed=9)
        assert torch.equal(sample.x_out, full.final)

    @pytest.mark.parametrize("k", [0, 5])
    def test_intermediate_invalid_step(self, small_net, k):
        """Тест ошибки при k вне [1, K]"""
        with pytest.raises(InvalidArgumentError):
            generate_with_intermediate(small_net, torch.zeros(1, 2, dtype=DTYPE), make_schedule(4), k, EtaPolicy())

    def test_consistent_noise_propagates(self):
        """Тест: при точном денойзере и η=1 шаг переносит ε* на уровень σ_prev"""
        x0 = [0.4, -1.2]
        net = one_point_denoiser(x0)
        point = torch.tensor([x0] * 5, dtype=DTYPE)
        eps_star = torch.randn(5, 2, generator=torch.Generator().manual_seed(20), dtype=DTYPE)
        fresh = torch.randn(5, 2, generator=torch.Generator().manual_seed(21), dtype=DTYPE)
        with torch.no_grad():
            for sigma_k, sigma_prev in ((1.0, 0.75), (0.75, 0.5), (0.6, 0.1)):
                x_k = forward_diffuse(point, sigma_k, eps_star)
                x_prev, _ = gen_step(net, x_k, sigma_k, sigma_prev, 1.0, fresh)
                assert torch.allclose(x_prev, forward_diffuse(point, sigma_prev, eps_star), atol=1e-12)

    def test_tiny_step_is_near_identity(self):
        """Тест: при σ_k - σ_prev = 1e-6 шаг почти не сдвигает точку"""
        x0 = [1.0, 2.0]
        net = one_point_denoiser(x0)
        eps_star = torch.randn(4, 2, generator=torch.Generator().manual_seed(22), dtype=DTYPE)
        x_k = forward_diffuse(torch.tensor([x0] * 4, dtype=DTYPE), 0.5, eps_star)
        with torch.no_grad():
            x_prev, _ = gen_step(net, x_k, 0.5, 0.5 - 1e-6, 1.0, torch.zeros_like(x_k))
        assert torch.allclose(x_prev, x_k, atol=1e-4)

    def test_eta_changes_final_sample(self, small_net):
        """Тест: η=0 и η=1 из одного z дают разные x_0"""
        z = torch.randn(16, 2, generator=torch.Generator().manual_seed(23), dtype=DTYPE)
        with torch.no_grad():
            ddim = generate(small_net, z, make_schedule(4), EtaPolicy(mode="fixed", value=1.0), seed=3).final
            noisy = generate(small_net, z, make_schedule(4), EtaPolicy(mode="fixed", value=0.0), seed=3).final
        assert torch.linalg.vector_norm(ddim - noisy).item() > 0

    def test_intermediate_gradient_treats_prefix_as_constant(self):
        """Тест: градиент ‖x0_pred_k‖² по весам равен градиенту при замороженном входе шага"""
        net = Denoiser(2, hidden_layers=1, width=6, seed=4)
        z = torch.randn(5, 2, generator=torch.Generator().manual_seed(24), dtype=DTYPE)
        schedule, policy = make_schedule(4), EtaPolicy(mode="fixed", value=1.0)
        sample = generate_with_intermediate(net, z, schedule, 2, policy, seed=1)
        weight = net.layers[0].weight
        (grad,) = torch.autograd.grad((sample.x0_pred ** 2).sum(), weight)
        x_in = sample.x_in.detach().clone()

        def with_weight(w, objective):
            with torch.no_grad():
                original = weight.detach().clone()
                weight.copy_(w.reshape(weight.shape))
                value = objective()
                weight.copy_(original)
            return value

        def frozen_input():
            return (denoise(net, x_in, sample.sigma_in) ** 2).sum()

        def live_prefix():
            return (generate_with_intermediate(net, z, schedule, 2, policy, seed=1).x0_pred ** 2).sum()

        flat = weight.detach().reshape(-1)
        frozen = finite_diff_gradient(lambda w: with_weight(w, frozen_input), flat, h=1e-5)
        live = finite_diff_gradient(lambda w: with_weight(w, live_prefix), flat, h=1e-5)
        grad = grad.reshape(-1)
        assert (torch.linalg.vector_norm(grad - frozen) / torch.linalg.vector_norm(frozen)).item() < 1e-6
        assert (torch.linalg.vector_norm(grad - live) / torch.linalg.vector_norm(live)).item() > 1e-3

    def test_row_steps_follow_full_chain(self, small_net):
        """Тест: вход и выход шага каждой строки - состояния полной цепочки на ее уровнях"""
        z = torch.randn(6, 2, generator=torch.Generator().manual_seed(25), dtype=DTYPE)
        ks = torch.tensor([1, 2, 3, 4, 2, 4])
        with torch.no_grad():
            full = generate(small_net, z, make_schedule(4), EtaPolicy(), seed=9)
            rows = generate_with_intermediate_rows(small_net, z, make_schedule(4), ks, EtaPolicy(), seed=9)
        assert torch.equal(rows.final, full.final)
        for i, k in enumerate(ks.tolist()):
            assert torch.equal(rows.x_in[i], full.states[4 - k][i])
            assert torch.allclose(rows.x0_pred[i], full.x0_preds[4 - k][i], atol=1e-12)
            assert torch.allclose(rows.x_out[i], full.states[5 - k][i], atol=1e-12)
        assert rows.sigma_in.reshape(-1).tolist() == [0.25, 0.5, 0.75, 1.0, 0.5, 1.0]
        assert rows.sigma_out.reshape(-1).tolist() == [0.0, 0.25, 0.5, 0.75, 0.25, 0.75]

    def test_row_steps_use_one_differentiable_call(self, small_net):
        """Тест: цепочка без градиента, один общий дифференцируемый вызов сети"""
        z = torch.randn(8, 2, generator=torch.Generator().manual_seed(26), dtype=DTYPE)
        small_net.differentiable_calls = 0
        rows = generate_with_intermediate_rows(small_net, z, make_schedule(3), torch.tensor([1, 2, 3] * 2 + [1, 1]),
                                               EtaPolicy(), seed=0)
        assert small_net.differentiable_calls == 1
        assert not rows.x_in.requires_grad
        assert not rows.final.requires_grad
        assert rows.x_out.requires_grad

    @pytest.mark.parametrize("ks", [[1, 2], [0, 1, 2], [1, 2, 5]])
    def test_row_steps_invalid(self, small_net, ks):
        """Тест ошибок при неверном числе или диапазоне шагов"""
        with pytest.raises(InvalidArgumentError):
            generate_with_intermediate_rows(small_net, torch.zeros(3, 2, dtype=DTYPE), make_schedule(4),
                                            torch.tensor(ks), EtaPolicy())
