import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from timedistill.errors import DimensionError, ParameterError, UsageError
from timedistill.model import (
    EncoderStack,
    ModelDims,
    ProjectionHead,
    apply_center,
    branch_forward,
    ema_update,
    encode,
    init_params,
    project,
    receptive_field,
    student_forward,
    teacher_forward,
    update_center,
)
from timedistill.numeric import GradTape, ParamSet, Tensor, backward, finite_diff_check, mul, sum_


def _identity_encoder(K, depth=2):
    dims = ModelDims(input_dims=1, hidden_dims=2, repr_dims=K, depth=depth, kernel_size=3, width=K)
    params = ParamSet({"enc.in.W": np.eye(K), "enc.in.b": np.zeros(K), "enc.out.W": np.eye(K), "enc.out.b": np.zeros(K)})
    for p in range(depth):
        for conv in ("conv1", "conv2"):
            params.add(f"enc.block{p:02d}.{conv}.kernel", np.zeros((K, K, 3)))
            params.add(f"enc.block{p:02d}.{conv}.bias", np.zeros(K))
    return EncoderStack(params, dims)


class TestInitParams:
    def test_teacher_equals_student(self, tiny_state):
        assert tiny_state.teacher.names() == tiny_state.student.names()
        for name, tensor in tiny_state.teacher.items():
            assert_array_equal(tensor.data, tiny_state.student[name].data)
        assert_array_equal(tiny_state.center, 0.0)

    def test_kaiming_variance_and_bias_range(self):
        state = init_params(0, ModelDims(input_dims=3))
        weights = state.student["proj.l2.W"].data
        assert abs(weights.var() / (2.0 / 64) - 1.0) < 0.1
        bias = state.student["proj.l2.b"].data
        assert np.all(np.abs(bias) <= 1.0 / np.sqrt(64))

    def test_default_output_width(self):
        state = init_params(0, ModelDims(input_dims=7))
        assert state.student["proj.out.V"].shape == (64, 320)

    def test_rejects_non_positive_dims(self):
        with pytest.raises(ParameterError):
            init_params(0, ModelDims(input_dims=0))

    def test_independent_teacher(self, tiny_dims):
        state = init_params(0, tiny_dims, independent_teacher=True)
        assert not np.array_equal(state.teacher["enc.in.W"].data, state.student["enc.in.W"].data)


class TestProjection:
    def test_shapes_and_unit_norm(self, tiny_state, tiny_dims, rng):
        head = ProjectionHead(tiny_state.student, tiny_dims)
        z, normalized = project(head, Tensor(rng.normal(size=(2, 5, 3))), return_normalized=True)
        assert z.shape == (2, 5, tiny_dims.repr_dims)
        assert_allclose(np.linalg.norm(normalized.data, axis=-1), 1.0)

    def test_channel_mismatch(self, tiny_state, tiny_dims):
        with pytest.raises(DimensionError):
            project(ProjectionHead(tiny_state.student, tiny_dims), Tensor(np.zeros((1, 4, 5))))


class TestEncoder:
    def test_zero_kernels_give_identity(self, rng):
        enc = _identity_encoder(4)
        z = rng.normal(size=(2, 9, 4))
        assert_array_equal(encode(enc, Tensor(z)).data, z)

    def test_future_does_not_leak(self, tiny_state, tiny_dims, rng):
        enc = EncoderStack(tiny_state.student, tiny_dims)
        z = rng.normal(size=(1, 20, tiny_dims.repr_dims))
        reference = encode(enc, Tensor(z)).data
        perturbed = z.copy()
        perturbed[:, -1] += 3.0
        out = encode(enc, Tensor(perturbed)).data
        assert_array_equal(out[:, :-1], reference[:, :-1])
        assert not np.array_equal(out[:, -1], reference[:, -1])

    def test_receptive_field_by_perturbation(self, tiny_state, tiny_dims, rng):
        field = receptive_field(tiny_dims)
        assert field == 29
        enc = EncoderStack(tiny_state.student, tiny_dims)
        z = rng.normal(size=(1, 40, tiny_dims.repr_dims))
        reference = encode(enc, Tensor(z)).data
        perturbed = z.copy()
        perturbed[:, 0] += 1.0
        out = encode(enc, Tensor(perturbed)).data
        assert not np.array_equal(out[:, field - 1], reference[:, field - 1])
        assert_array_equal(out[:, field:], reference[:, field:])

    def test_receptive_field_per_block(self, tiny_dims):
        assert [receptive_field(tiny_dims, p) for p in range(3)] == [5, 13, 29]

    def test_wrong_last_axis(self, tiny_state, tiny_dims):
        with pytest.raises(DimensionError):
            encode(EncoderStack(tiny_state.student, tiny_dims), Tensor(np.zeros((1, 4, 3))))


class TestBranches:
    def test_teacher_without_mask_matches_plain_forward(self, tiny_state, tiny_dims, rng):
        x = rng.normal(size=(2, 10, 3))
        h_t = teacher_forward(tiny_state, x, 1.0, rng)
        assert h_t.shape == (2, 10, tiny_dims.repr_dims)
        assert_array_equal(h_t.data, branch_forward(tiny_state.teacher, tiny_dims, Tensor(x)).data)

    def test_equal_params_equal_outputs(self, tiny_state, rng):
        x = rng.normal(size=(2, 10, 3))
        assert_array_equal(teacher_forward(tiny_state, x, 1.0, rng).data, student_forward(tiny_state, x).data)

    def test_teacher_input_mask_skips_latent_mask(self, tiny_state, tiny_dims, rng):
        x = rng.normal(size=(2, 10, 3))
        h_t = teacher_forward(tiny_state, x, 1e-12, rng, latent_mask=False)
        assert_array_equal(h_t.data, branch_forward(tiny_state.teacher, tiny_dims, Tensor(x)).data)

    def test_teacher_latent_mask_zeroes_projection(self, tiny_state, tiny_dims, rng):
        x = rng.normal(size=(2, 10, 3))
        h_t = teacher_forward(tiny_state, x, 1e-12, rng)
        expected = encode(EncoderStack(tiny_state.teacher, tiny_dims), Tensor(np.zeros((2, 10, tiny_dims.repr_dims))))
        assert_array_equal(h_t.data, expected.data)

    def test_student_latent_mask(self, tiny_state, tiny_dims, rng):
        x = rng.normal(size=(2, 10, 3))
        h_s = student_forward(tiny_state, x, keep_prob=1e-12, rng=rng)
        expected = encode(EncoderStack(tiny_state.student, tiny_dims), Tensor(np.zeros((2, 10, tiny_dims.repr_dims))))
        assert_array_equal(h_s.data, expected.data)
        assert_array_equal(
            student_forward(tiny_state, x, keep_prob=1.0, rng=rng).data,
            student_forward(tiny_state, x).data,
        )

    def test_teacher_receives_no_gradient(self, tiny_state, rng):
        x = rng.normal(size=(2, 10, 3))
        tape = GradTape()
        tape.watch(tiny_state.student, "student.")
        tape.watch(tiny_state.teacher, "teacher.")
        with tape:
            h_t = teacher_forward(tiny_state, x, 0.5, rng)
            h_s = student_forward(tiny_state, x)
            loss = sum_(mul(h_s, h_t))
        grads = backward(tape, loss)
        assert all(not np.any(g) for name, g in grads.items() if name.startswith("teacher."))
        assert all(np.any(g) for name, g in grads.items() if name.startswith("student."))

    def test_student_gradient_matches_finite_differences(self, tiny_dims, rng):
        state = init_params(3, tiny_dims)
        x = Tensor(rng.normal(size=(2, 8, 3)))
        weights = Tensor(rng.normal(size=(2, 8, tiny_dims.repr_dims)))
        error = finite_diff_check(
            lambda p: sum_(mul(branch_forward(p, tiny_dims, x), weights)),
            state.student,
            max_coords=4,
            rng=np.random.default_rng(0),
        )
        assert error < 1e-3


class TestCenter:
    def test_identical_outputs_center_to_zero(self, tiny_state):
        v = np.arange(8.0)
        h = Tensor(np.broadcast_to(v, (3, 4, 8)).copy())
        assert_array_equal(update_center(tiny_state, h), v)
        assert_array_equal(apply_center(tiny_state, h).data, 0.0)

    def test_centered_mean_is_zero(self, tiny_state, rng):
        h = Tensor(rng.normal(size=(3, 5, 8)))
        update_center(tiny_state, h)
        assert np.all(np.abs(apply_center(tiny_state, h).data.mean(axis=(0, 1))) < 1e-12)

    def test_constant_shift_cancels(self, tiny_state, rng):
        h = rng.normal(size=(3, 5, 8))
        update_center(tiny_state, Tensor(h))
        first = apply_center(tiny_state, Tensor(h)).data
        shifted = h + rng.normal(size=8)
        update_center(tiny_state, Tensor(shifted))
        assert_allclose(apply_center(tiny_state, Tensor(shifted)).data, first, atol=1e-12)

    def test_empty_batch(self, tiny_state):
        with pytest.raises(UsageError):
            update_center(tiny_state, Tensor(np.zeros((0, 5, 8))))


class TestEma:
    def _scalar_state(self, teacher, student, momentum):
        state = init_params(0, ModelDims(input_dims=1, hidden_dims=1, repr_dims=1, depth=1, kernel_size=1, width=1))
        state.teacher = state.teacher.replace({n: np.full(t.shape, teacher) for n, t in state.teacher.items()})
        state.student = state.student.replace({n: np.full(t.shape, student) for n, t in state.student.items()})
        state.momentum = momentum
        return state

    def test_forced_arithmetic(self):
        state = ema_update(self._scalar_state(1.0, 0.0, 0.9))
        for _, tensor in state.teacher.items():
            assert_allclose(tensor.data, 0.9)
        for _, tensor in state.student.items():
            assert_array_equal(tensor.data, 0.0)

    def test_zero_momentum_copies_student(self, tiny_state, rng):
        tiny_state.student = tiny_state.student.replace(
            {n: rng.normal(size=t.shape) for n, t in tiny_state.student.items()}
        )
        tiny_state.momentum = 0.0
        ema_update(tiny_state)
        for name, tensor in tiny_state.teacher.items():
            assert_array_equal(tensor.data, tiny_state.student[name].data)

    def test_geometric_contraction(self, tiny_state, rng):
        tiny_state.teacher = tiny_state.teacher.replace(
            {n: t.data + rng.normal(size=t.shape) for n, t in tiny_state.teacher.items()}
        )
        tiny_state.momentum = 0.999
        gap = {n: np.abs(t.data - tiny_state.student[n].data) for n, t in tiny_state.teacher.items()}
        for _ in range(100):
            ema_update(tiny_state)
        for name, tensor in tiny_state.teacher.items():
            assert_allclose(np.abs(tensor.data - tiny_state.student[name].data), 0.999 ** 100 * gap[name], atol=1e-12)

    def test_stays_between_teacher_and_student(self, tiny_state, rng):
        tiny_state.student = tiny_state.student.replace(
            {n: rng.normal(size=t.shape) for n, t in tiny_state.student.items()}
        )
        tiny_state.momentum = 0.7
        before = tiny_state.teacher.arrays()
        ema_update(tiny_state)
        for name, tensor in tiny_state.teacher.items():
            low = np.minimum(before[name], tiny_state.student[name].data)
            high = np.maximum(before[name], tiny_state.student[name].data)
            assert np.all((tensor.data >= low) & (tensor.data <= high))

    @pytest.mark.parametrize("momentum", [1.0, -0.1])
    def test_invalid_momentum(self, tiny_state, momentum):
        tiny_state.momentum = momentum
        with pytest.raises(ParameterError):
            ema_update(tiny_state)

    def test_snapshot_is_independent(self, tiny_state):
        snapshot = tiny_state.snapshot()
        tiny_state.student.assign("enc.in.b", np.ones(8))
        assert not np.array_equal(snapshot.student["enc.in.b"].data, np.ones(8))
