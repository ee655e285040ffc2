import json
from typing import List, Optional

from sqlalchemy import (
    Column,
    Float,
    Integer,
    String,
    TEXT,
    UniqueConstraint,
    create_engine,
    delete,
)
from sqlalchemy.orm import DeclarativeBase, sessionmaker

from fragsel import storage
from fragsel.fig import FigRecord
from fragsel.models import EvidenceItem
from fragsel.utils import canonical_json


class Base(DeclarativeBase):
    def to_dict(self):
        return {c.name: getattr(self, c.name) for c in self.__table__.columns}


class FigRecordDBModel(Base):
    __tablename__ = "fig_records"
    __table_args__ = (
        UniqueConstraint("query_id", "fragment_id", name="uq_fig_query_fragment"),
    )

    id = Column(Integer, primary_key=True, autoincrement=True)
    query_id = Column(String(256), nullable=False)
    query_text = Column(TEXT, nullable=False)
    fragment_id = Column(String(512), nullable=False)
    fragment = Column(TEXT, nullable=False)
    fig = Column(Float, nullable=False)
    hard_label = Column(Integer, nullable=False)
    tau_fig = Column(Float, nullable=False)
    teacher_logit = Column(Float, nullable=True)

    def to_record(self) -> FigRecord:
        return FigRecord(
            query_id=self.query_id,
            query_text=self.query_text,
            fragment=EvidenceItem.from_dict(json.loads(self.fragment)),
            fig=self.fig,
            hard_label=self.hard_label,
            tau_fig=self.tau_fig,
            teacher_logit=self.teacher_logit,
        )


def _columns(record: FigRecord) -> dict:
    return {
        "query_id": record.query_id,
        "query_text": record.query_text,
        "fragment_id": record.fragment_id,
        "fragment": canonical_json(record.fragment.to_dict()),
        "fig": record.fig,
        "hard_label": record.hard_label,
        "tau_fig": record.tau_fig,
        "teacher_logit": record.teacher_logit,
    }


class SQLFigStorage(storage.FigStorageInterface):
    def __init__(self, connection_string="sqlite:///fragsel.db") -> None:
        engine = create_engine(connection_string, echo=False)
        Base.metadata.create_all(engine)
        self.session = sessionmaker(bind=engine)

    def get_records(
        self,
        limit: int,
        offset: int = 0,
        query_id: Optional[str] = None,
        hard_label: Optional[int] = None,
    ) -> List[FigRecord]:
        with self.session.begin() as session:
            query = session.query(FigRecordDBModel)
            if query_id is not None:
                query = query.filter(FigRecordDBModel.query_id == query_id)
            if hard_label is not None:
                query = query.filter(FigRecordDBModel.hard_label == hard_label)
            query = query.order_by(FigRecordDBModel.id).limit(limit).offset(offset)
            return [row.to_record() for row in query.all()]

    def get_record(self, query_id: str, fragment_id: str) -> Optional[FigRecord]:
        with self.session.begin() as session:
            existing = (
                session.query(FigRecordDBModel)
                .filter(
                    FigRecordDBModel.query_id == query_id,
                    FigRecordDBModel.fragment_id == fragment_id,
                )
                .first()
            )
            if not existing:
                return None
            return existing.to_record()

    def update_or_create_record(self, record: FigRecord) -> bool:
        values = _columns(record)
        with self.session.begin() as session:
            existing = (
                session.query(FigRecordDBModel)
                .filter(
                    FigRecordDBModel.query_id == record.query_id,
                    FigRecordDBModel.fragment_id == record.fragment_id,
                )
                .first()
            )
            if not existing:
                session.add(FigRecordDBModel(**values))
                return True

            for name, value in values.items():
                setattr(existing, name, value)
        return False

    def delete_records(self, query_ids: List[str]):
        stmt = delete(FigRecordDBModel).where(FigRecordDBModel.query_id.in_(query_ids))
        with self.session.begin() as session:
            session.execute(stmt)
