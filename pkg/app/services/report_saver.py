import asyncio
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
from pydantic import BaseModel

from app.models.config import RunConfig
from app.services.store import atomic_write_text, ensure_writable

log = logging.getLogger(__name__)

REPORT_VERSION = "1.0"

Payload = Union[BaseModel, Dict[str, Any], List[Any]]


class ReportSaver:
    """JSON-отчёты и CSV-таблицы запуска в `<out>/reports` и `<out>/csv`."""

    def __init__(self, base_dir: str | Path = "output", run_config: Optional[RunConfig] = None,
                 force: bool = False):
        self.base_dir = Path(base_dir)
        self.json_dir = self.base_dir / "reports"
        self.csv_dir = self.base_dir / "csv"
        self.run_config = run_config
        self.force = force

        self._ensure_directories()

    def _ensure_directories(self):
        """Создание необходимых директорий"""
        self.json_dir.mkdir(parents=True, exist_ok=True)
        self.csv_dir.mkdir(parents=True, exist_ok=True)
        log.debug(f"Директории отчётов: {self.base_dir}")

    def _run_info(self) -> Dict[str, Any]:
        info: Dict[str, Any] = {"version": REPORT_VERSION}
        if self.run_config is not None:
            info["seed"] = self.run_config.seed
            info["config"] = self.run_config.model_dump(mode="json")
        return info

    def render_json(self, report: Payload, extra: Optional[Dict[str, Any]] = None) -> str:
        body = report.model_dump(mode="json") if isinstance(report, BaseModel) else report
        data = {"report": body, "run_info": self._run_info(), **(extra or {})}
        return json.dumps(data, ensure_ascii=False, indent=2, default=str) + "\n"

    async def save_json(self, name: str, report: Payload, extra: Optional[Dict[str, Any]] = None) -> str:
        """
        Асинхронное сохранение отчёта в JSON вместе с конфигурацией и сидом запуска.
        """
        try:
            filepath = ensure_writable(self.json_dir / f"{name}.json", self.force)
            text = self.render_json(report, extra)
            await asyncio.to_thread(atomic_write_text, filepath, text)
            log.info(f"Сохранен JSON: {filepath.name}")
            return str(filepath)
        except Exception as e:
            log.error(f"Ошибка сохранения JSON {name}: {e}")
            raise

    async def save_csv(self, name: str, rows: Union[pd.DataFrame, List[Dict[str, Any]]]) -> str:
        """
        Асинхронное сохранение таблицы в CSV.
        """
        try:
            df = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
            if df.empty:
                log.warning(f"Таблица {name} пуста")
            filepath = ensure_writable(self.csv_dir / f"{name}.csv", self.force)

            def write_csv():
                buffer = io.StringIO()
                df.to_csv(buffer, index=False)
                atomic_write_text(filepath, buffer.getvalue())

            await asyncio.to_thread(write_csv)
            log.info(f"Сохранен CSV: {filepath.name} ({len(df)} записей)")
            return str(filepath)
        except Exception as e:
            log.error(f"Ошибка сохранения CSV {name}: {e}", exc_info=True)
            raise

    async def save_all(self, name: str, report: Payload,
                       tables: Optional[Dict[str, Union[pd.DataFrame, List[Dict[str, Any]]]]] = None,
                       extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """JSON-отчёт и сопутствующие CSV параллельно."""
        tables = tables or {}
        tasks = [self.save_json(name, report, extra)]
        tasks.extend(self.save_csv(table_name, rows) for table_name, rows in tables.items())
        results = await asyncio.gather(*tasks)
        saved = {"json": results[0], "csv": list(results[1:])}
        log.info(f"Сохранено файлов: 1 JSON, {len(saved['csv'])} CSV")
        return saved
