import torch

from isds.trainer.lr_scheduling import PlateauDecay, RelativeReduceLROnPlateau


def make_optimizer(lr=1.0):
    param = torch.nn.Parameter(torch.zeros(1))
    return torch.optim.Adam([param], lr=lr)


def test_relative_improvement_on_negative_objectives():
    scheduler = RelativeReduceLROnPlateau(make_optimizer(), threshold=1e-4)
    assert scheduler.is_better(-10.0, float("-inf"))
    assert scheduler.is_better(-9.99, -10.0)
    assert not scheduler.is_better(-9.99999, -10.0)
    assert not scheduler.is_better(-10.5, -10.0)


def test_plateau_decays_twice_then_stops():
    optimizer = make_optimizer()
    plateau = PlateauDecay(optimizer, factor=0.5, patience=2, max_decays=2)
    stops = [plateau.step(-10.0) for _ in range(10)]
    assert stops == [False] * 9 + [True]
    assert plateau.num_decays == 2
    assert plateau.lr == 0.25


def test_improvement_postpones_the_decay():
    optimizer = make_optimizer()
    plateau = PlateauDecay(optimizer, patience=2)
    for value in (-10.0, -9.0, -8.0, -7.0, -6.0):
        assert not plateau.step(value)
    assert plateau.num_decays == 0
    assert plateau.lr == 1.0
