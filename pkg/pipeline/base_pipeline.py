from abc import ABC, abstractmethod


class OrchestrationPipeline(ABC):
    @abstractmethod
    def run(self, *args, **kwargs):
        pass


class BlockStage(ABC):
    """One optimization stage applied to a single block; blocks never share state."""

    name: str = "stage"

    @abstractmethod
    def run(self, *args, **kwargs):
        pass
