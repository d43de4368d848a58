from enum import Enum


class StrategyKind(Enum):
    NCOP = "ncop"
    CENTRALIZED_SYNC = "centralized_sync"
    CENTRALIZED_RANDOM_MU = "centralized_random_mu"
    CENTRALIZED_RANDOM_FUSION = "centralized_random_fusion"
    CONSENSUS = "consensus"
    CTA = "cta"
    ATC = "atc"
    UNIFIED = "unified"
    ATC_ENLARGED = "atc_enlarged"

    @property
    def is_centralized(self) -> bool:
        return self.value.startswith("centralized")

    @property
    def is_distributed(self) -> bool:
        return self in (StrategyKind.CONSENSUS, StrategyKind.CTA, StrategyKind.ATC,
                        StrategyKind.UNIFIED, StrategyKind.ATC_ENLARGED)

    @classmethod
    def parse(cls, value) -> "StrategyKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(kind.value for kind in cls)
            raise ValueError(f"unknown strategy kind '{value}' (expected one of: {names})")
