"""Entry point: `python main.py <command>` runs the m3fas CLI."""

from app.cli import app

if __name__ == "__main__":
    app()
