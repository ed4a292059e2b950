import argparse

from app.cli import commands


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="TOML-файл конфигурации запуска")
    parser.add_argument("--seed", type=int, help="Верхнеуровневый сид (перекрывает файл)")
    parser.add_argument("--out", metavar="DIR", help="Директория артефактов (по умолчанию SDA_DATA_DIR)")
    parser.add_argument("--force", action="store_true", help="Перезаписывать существующие файлы")
    parser.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="Переопределение значения конфига, можно повторять",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sda-rec",
        description="Структурная и разделённая по модальностям адаптация энкодера для рекомендаций",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    routes = [
        ("generate", commands.cmd_generate, "Синтетический каталог и лог взаимодействий"),
        ("adapt", commands.cmd_adapt, "Этап 1: обучение адаптеров под лосс выравнивания"),
        ("embed", commands.cmd_embed, "Предрасчёт эмбеддингов каталога"),
        ("train-rec", commands.cmd_train_rec, "Этап 2: обучение рекомендера"),
        ("eval", commands.cmd_eval, "Leave-one-out оценка Overall/Tail H@K, N@K"),
        ("diagnose", commands.cmd_diagnose, "Конфликт градиентов модальностей LoRA против MoDA"),
        ("ablate", commands.cmd_ablate, "Абляция: пять конфигураций и относительные Δ"),
        ("compare", commands.cmd_compare, "Сравнение экстракторов: base, raw, sda"),
        ("modality", commands.cmd_modality, "Вклад модальностей: режимы слияния"),
    ]
    for name, handler, help_text in routes:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "eval":
            p.add_argument("--target", choices=["test", "valid"], default="test",
                           help="Целевой айтем: test (последний) или valid (предпоследний)")
            p.add_argument("--json", action="store_true", help="Печатать отчёт JSON вместо таблицы")
        p.set_defaults(handler=handler)
    return parser
