import numpy as np
import pytest
import torch

from mccseg.losses import MccConfig
from mccseg.model import (
    ArchitectureSpec,
    NonFiniteLossError,
    build_network,
    load_checkpoint,
    make_optimizer,
    register_architecture,
    save_checkpoint,
    training_step,
    unregister_architecture,
)
from mccseg.sampler import SOURCE, TARGET, MixedBatch

SPEC = ArchitectureSpec("mini-unet", num_classes=5)


def test_output_shape():
    net = build_network(SPEC).eval()
    assert net(torch.randn(1, 3, 64, 64)).shape == (1, 5, 64, 64)


@pytest.mark.parametrize("size", [32, 64, 96])
def test_shape_invariance(size):
    net = build_network(SPEC).eval()
    assert net(torch.randn(2, 3, size, size + 32)).shape == (2, 5, size, size + 32)


def test_rejects_non_multiple_input():
    with pytest.raises(ValueError, match="multiple"):
        build_network(SPEC)(torch.randn(1, 3, 30, 32))


def test_parameter_budget():
    n = sum(p.numel() for p in build_network(SPEC).parameters())
    assert 80_000 < n < 150_000


def test_seeded_init():
    a, b = build_network(SPEC, seed=3), build_network(SPEC, seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_network(SPEC, seed=4)
    assert not all(torch.equal(pa, pc) for pa, pc in zip(a.parameters(), c.parameters()))


def test_unregistered_adapter():
    with pytest.raises(KeyError, match="adapter not registered"):
        build_network(ArchitectureSpec("hrnet"))
    with pytest.raises(KeyError, match="unknown architecture"):
        build_network(ArchitectureSpec("resnet-9000"))


def test_registered_adapter():
    register_architecture("hrnet", lambda spec: torch.nn.Conv2d(3, spec.num_classes, 1))
    try:
        net = build_network(ArchitectureSpec("hrnet", num_classes=3))
        assert net(torch.randn(1, 3, 8, 8)).shape == (1, 3, 8, 8)
    finally:
        unregister_architecture("hrnet")


def test_num_classes_validated():
    with pytest.raises(ValueError):
        ArchitectureSpec(num_classes=1)


def test_eval_determinism():
    net = build_network(SPEC).eval()
    x = torch.randn(2, 3, 32, 32)
    assert torch.equal(net(x), net(x))


def test_every_parameter_gets_gradient():
    net = build_network(SPEC)
    g = torch.Generator().manual_seed(0)
    batch = MixedBatch(torch.randn(4, 3, 32, 32, generator=g), torch.randint(1, 5, (4, 32, 32), generator=g),
                       (TARGET,) * 4)
    training_step(net, batch, "supervised", torch.optim.SGD(net.parameters(), lr=0.0))
    for name, p in net.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def _batch(seed, mixed=True, b=4, size=32):
    g = torch.Generator().manual_seed(seed)
    domain = (TARGET,) * (b // 2) + (SOURCE,) * (b // 2) if mixed else (TARGET,) * b
    return MixedBatch(torch.randn(b, 3, size, size, generator=g),
                      torch.randint(1, 5, (b, size, size), generator=g), domain, f"b{seed}")


def test_all_ignored_step_leaves_parameters():
    net = build_network(SPEC)
    opt = make_optimizer(net)
    before = [p.detach().clone() for p in net.parameters()]
    batch = _batch(0, mixed=False)
    batch.labels.zero_()
    result = training_step(net, batch, "supervised", opt)
    assert result.loss == 0.0
    for p, q in zip(net.parameters(), before):
        assert torch.equal(p, q)


def test_step_changes_parameters():
    net = build_network(SPEC)
    before = [p.detach().clone() for p in net.parameters()]
    training_step(net, _batch(1), "mcc_transfer", make_optimizer(net), MccConfig(pixel_subsample=256),
                  generator=torch.Generator().manual_seed(0))
    assert any(not torch.equal(p, q) for p, q in zip(net.parameters(), before))


def _losses(seed):
    net = build_network(SPEC, seed=seed)
    opt = make_optimizer(net)
    gen = torch.Generator().manual_seed(seed)
    return [training_step(net, _batch(i), "mcc_semi", opt, MccConfig(pixel_subsample=512), generator=gen).loss
            for i in range(10)]


def test_loss_sequence_deterministic():
    a, b = _losses(7), _losses(7)
    assert a == b


def test_non_finite_loss_aborts():
    net = build_network(SPEC)
    batch = _batch(2, mixed=False)
    batch.images[0, 0, 0, 0] = float("nan")
    with pytest.raises((NonFiniteLossError, ValueError)):
        training_step(net, batch, "supervised", make_optimizer(net))


def test_nan_supervised_reports_batch_id():
    net = build_network(SPEC)
    with torch.no_grad():
        net.head.bias.fill_(float("inf"))
    with pytest.raises(NonFiniteLossError, match="b3"):
        training_step(net, _batch(3, mixed=False), "supervised", make_optimizer(net))


def test_two_class_separable_learning():
    # bright pixels are class 1, dark pixels class 2
    torch.manual_seed(0)
    spec = ArchitectureSpec(num_classes=3)
    net = build_network(spec, seed=0)
    opt = make_optimizer(net)
    g = torch.Generator().manual_seed(0)
    losses = []
    for step in range(200):
        mask = torch.rand(4, 1, 32, 32, generator=g) > 0.5
        images = torch.where(mask, 1.0, -1.0).expand(4, 3, 32, 32) + 0.3 * torch.randn(4, 3, 32, 32, generator=g)
        labels = torch.where(mask[:, 0], 1, 2)
        losses.append(training_step(net, MixedBatch(images, labels, (TARGET,) * 4), "supervised", opt).loss)
    assert losses[-1] <= 0.5 * losses[0]


def test_checkpoint_round_trip(tmp_path):
    net = build_network(SPEC, seed=5)
    opt = make_optimizer(net)
    training_step(net, _batch(4, mixed=False), "supervised", opt)
    net.eval()
    x = torch.randn(1, 3, 32, 32)
    expected = net(x)
    path = save_checkpoint(tmp_path / "c.pt", SPEC, net, opt, step=1, config={"regime": "supervised"})
    ckpt = load_checkpoint(path)
    assert torch.equal(ckpt.net(x), expected)
    assert ckpt.step == 1 and ckpt.config["regime"] == "supervised"
    assert ckpt.optimizer_state is not None


def test_checkpoint_mismatch(tmp_path):
    small = ArchitectureSpec(widths=(8, 16, 32))
    path = save_checkpoint(tmp_path / "c.pt", small, build_network(SPEC))
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(path)
    bogus = tmp_path / "x.pt"
    torch.save({"format": "other"}, bogus)
    with pytest.raises(ValueError, match="not a"):
        load_checkpoint(bogus)
