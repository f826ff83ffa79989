# stratakit/__main__.py
from stratakit.cli import main
from stratakit.settings import settings


def run() -> int:
    # settings come from the environment; command-line flags override them
    if settings.VERBOSE:
        print(f"[boot] stratakit threads={settings.THREADS} fold_size={settings.FOLD_SIZE} seed={settings.SEED}")
    return main()


if __name__ == "__main__":
    raise SystemExit(run())
