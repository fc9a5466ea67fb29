"""Run configuration: dataclass defaults < [sfr] section of an INI file < flags."""
import configparser
import dataclasses
from dataclasses import dataclass

from sfr.errors import ConfigError
from sfr.features import PyramidSpec
from sfr.triplet import LearningRateSchedule

SECTION = 'sfr'
SCHEDULES = ('constant', 'step')


def parse_kernels(raw):
    try:
        return tuple(int(k) for k in str(raw).replace(' ', '').strip('{}()[]').split(',') if k)
    except ValueError:
        raise ConfigError(f'kernels must be a comma-separated list of integers, got {raw!r}') from None


def parse_schedule(raw):
    """'constant' or 'step:FACTOR:INTERVAL' -> dict of schedule fields."""
    parts = str(raw).strip().split(':')
    if parts == ['constant']:
        return {'lr_schedule': 'constant'}
    if parts[0] == 'step' and len(parts) in (1, 3):
        out = {'lr_schedule': 'step'}
        if len(parts) == 3:
            out['lr_decay'] = parts[1]
            out['lr_interval'] = parts[2]
        return out
    raise ConfigError(f'learning-rate schedule must be constant or step:FACTOR:INTERVAL, got {raw!r}')


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.7
    beta: float = 1e-3
    margin: float = 0.3
    kernels: tuple = (1, 2, 3, 4)
    normalize: bool = True
    p: int = 32
    k: int = 4
    epochs: int = 40
    lr: float = 2e-3
    lr_schedule: str = 'step'
    lr_decay: float = 0.5
    lr_interval: int = 100
    seed: int = 7
    workers: int = 1
    subject_dictionaries: bool = False
    identities: int = 10

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f'alpha must lie in [0, 1], got {self.alpha}')
        if self.beta <= 0:
            raise ConfigError(f'beta must be positive, got {self.beta}')
        if self.margin < 0:
            raise ConfigError(f'margin must be nonnegative, got {self.margin}')
        if self.p < 2 or self.k < 2:
            raise ConfigError(f'P and K must be at least 2, got P={self.p}, K={self.k}')
        if self.epochs < 0:
            raise ConfigError(f'epochs must be nonnegative, got {self.epochs}')
        if self.lr < 0:
            raise ConfigError(f'learning rate must be nonnegative, got {self.lr}')
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f'unknown learning-rate schedule {self.lr_schedule!r}')
        if not 0 < self.lr_decay <= 1 or self.lr_interval < 1:
            raise ConfigError(f'step decay needs factor in (0, 1] and interval >= 1, '
                              f'got {self.lr_decay}, {self.lr_interval}')
        if self.workers < 1:
            raise ConfigError(f'workers must be at least 1, got {self.workers}')
        if self.identities < 2:
            raise ConfigError(f'toy data needs at least 2 identities, got {self.identities}')
        try:
            PyramidSpec(self.kernels)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def pyramid(self):
        return PyramidSpec(self.kernels)

    @property
    def schedule(self):
        return LearningRateSchedule(self.lr, self.lr_schedule, self.lr_decay, self.lr_interval)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, raw):
    if name not in FIELDS:
        raise ConfigError(f'unknown config key {name!r}')
    kind = type(FIELDS[name].default)
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else raw
    raw = raw.strip()
    try:
        if kind is bool:
            return configparser.ConfigParser.BOOLEAN_STATES[raw.lower()]
        if kind is tuple:
            return parse_kernels(raw)
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f'bad value for {name}: {raw!r}') from None


def load_config(path):
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f'cannot read config file {path}')
    if not parser.has_section(SECTION):
        return {}
    values = {}
    for key, raw in parser.items(SECTION):
        key = key.replace('-', '_')
        if key == 'lr_schedule':
            values.update(parse_schedule(raw))
        else:
            values[key] = raw
    return values


def resolve_config(flags=None, path=None):
    """flags: field name -> raw value, None meaning unset."""
    values = load_config(path) if path else {}
    for name, raw in (flags or {}).items():
        if raw is None:
            continue
        if name == 'lr_schedule':
            values.update(parse_schedule(raw))
        else:
            values[name] = raw
    return RunConfig(**{name: _coerce(name, raw) for name, raw in values.items()})
