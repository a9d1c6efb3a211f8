from dishka import Container, Provider, Scope, make_container, provide

from krts.config import RunConfig
from krts.storage import Storage
from krts.units import UnitStats, load_unit_stats


class ConfigProvider(Provider):
    def __init__(self, config: RunConfig):
        super().__init__()
        self.config = config

    @provide(scope=Scope.RUNTIME)
    def new_config(self) -> RunConfig:
        return self.config


class UnitStatsProvider(Provider):
    @provide(scope=Scope.RUNTIME)
    def new_unit_stats(self, config: RunConfig) -> UnitStats:
        return load_unit_stats(config.engine.unit_stats)


class StorageProvider(Provider):
    @provide(scope=Scope.RUNTIME)
    def new_storage(self, config: RunConfig) -> Storage:
        return Storage(config=config)


def make_di_container(config: RunConfig) -> Container:
    return make_container(
        ConfigProvider(config),
        UnitStatsProvider(),
        StorageProvider(),
    )
