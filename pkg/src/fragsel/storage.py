from abc import ABC, abstractmethod
from typing import List, Optional

from fragsel.fig import FigRecord


class FigStorageInterface(ABC):
    @abstractmethod
    def get_records(
        self,
        limit: int,
        offset: int = 0,
        query_id: Optional[str] = None,
        hard_label: Optional[int] = None,
    ) -> List[FigRecord]:
        # insertion order
        raise NotImplementedError

    @abstractmethod
    def get_record(self, query_id: str, fragment_id: str) -> Optional[FigRecord]:
        raise NotImplementedError

    @abstractmethod
    def update_or_create_record(self, record: FigRecord) -> bool:
        # returns true if created new row else false
        raise NotImplementedError

    @abstractmethod
    def delete_records(self, query_ids: List[str]):
        raise NotImplementedError
