import pytest

from sfr.config import RunConfig, load_config, parse_kernels, parse_schedule, resolve_config
from sfr.errors import ConfigError
from sfr.features import PyramidSpec


def test_defaults():
    config = resolve_config()

    assert config == RunConfig()
    assert (config.alpha, config.beta, config.margin) == (0.7, 1e-3, 0.3)
    assert (config.p, config.k, config.seed, config.workers) == (32, 4, 7, 1)
    assert config.normalize and not config.subject_dictionaries
    assert config.pyramid == PyramidSpec((1, 2, 3, 4))
    assert (config.epochs, config.lr) == (40, 2e-3)
    assert config.schedule.rate(99) == 2e-3 and config.schedule.rate(100) == pytest.approx(1e-3)


def test_parse_helpers():
    assert parse_kernels('1,2,3') == (1, 2, 3)
    assert parse_kernels('{1, 3}') == (1, 3)
    assert parse_schedule('constant') == {'lr_schedule': 'constant'}
    assert parse_schedule('step:0.1:50') == {'lr_schedule': 'step', 'lr_decay': '0.1', 'lr_interval': '50'}

    with pytest.raises(ConfigError):
        parse_kernels('1,x')
    with pytest.raises(ConfigError):
        parse_schedule('cosine')


def test_flags_override_file(tmp_path):
    path = tmp_path / 'config.ini'
    path.write_text('[sfr]\nalpha = 0.5\nbeta = 0.01\nnormalize = no\nlr-schedule = step:0.5:10\n')

    assert load_config(str(path))['alpha'] == '0.5'
    config = resolve_config({'alpha': '0.2', 'kernels': '1,2', 'workers': None}, str(path))
    assert config.alpha == 0.2 and config.beta == 0.01, config
    assert config.normalize is False and config.kernels == (1, 2)
    assert config.schedule.rate(25) == pytest.approx(2e-3 * 0.25)
    assert config.workers == 1


def test_file_without_section(tmp_path):
    path = tmp_path / 'config.ini'
    path.write_text('[other]\nalpha = 0.5\n')

    assert resolve_config(path=str(path)) == RunConfig()


@pytest.mark.parametrize('flags', [
    {'alpha': '1.5'},
    {'beta': '0'},
    {'margin': '-0.1'},
    {'p': '1'},
    {'kernels': '3,2'},
    {'lr_schedule': 'step:2:10'},
    {'workers': '0'},
    {'normalize': 'maybe'},
    {'seed': 'seven'},
])
def test_rejects(flags):
    with pytest.raises(ConfigError):
        resolve_config(flags)


def test_bad_file(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(path=str(tmp_path / 'missing.ini'))

    path = tmp_path / 'config.ini'
    path.write_text('[sfr]\nunknown = 1\n')
    with pytest.raises(ConfigError):
        resolve_config(path=str(path))
