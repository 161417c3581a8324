"""Run the laboratory with ``python -m sent_lab``."""

from .cli import main

main()
