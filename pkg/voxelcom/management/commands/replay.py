import json
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError

from ...exceptions import FormatError
from ...storage import content_hash, read_manifest
from ..base import PREREQUISITE_MISSING

# options every command owns or that replay itself pins
PINNED = ("config", "out", "seed")


class Command(BaseCommand):
    help = "Re-run the command recorded in a manifest with its resolved config and seed, and verify every output hash."

    def add_arguments(self, parser):
        parser.add_argument("manifest", help="manifest_<command>.json written by an earlier run")

    def handle(self, *args, **options):
        path = Path(options["manifest"])
        if not path.exists():
            raise CommandError(f"{path} not found", returncode=PREREQUISITE_MISSING)
        try:
            manifest = read_manifest(path)
        except FormatError as exc:
            raise CommandError(str(exc), returncode=PREREQUISITE_MISSING) from exc
        out_dir = path.parent
        command = manifest["command"]
        config_path = out_dir / f"replay_config_{command}.json"
        config_path.write_text(json.dumps(manifest["config"], indent=2, sort_keys=True))
        recorded = {k: v for k, v in manifest["options"].items() if k not in PINNED and v is not None}
        call_command(
            command,
            config=str(config_path),
            out=str(out_dir),
            seed=manifest["seed"],
            stdout=self.stdout,
            stderr=self.stderr,
            **recorded,
        )
        mismatched = sorted(
            name
            for name, digest in manifest["outputs"].items()
            if not self._locate(out_dir, name) or content_hash(self._locate(out_dir, name)) != digest
        )
        if mismatched:
            raise CommandError(f"replay of {command} differs in: {', '.join(mismatched)}")
        self.stdout.write(self.style.SUCCESS(f"replay of {command}: {len(manifest['outputs'])} output(s) reproduced bit-exactly"))

    def _locate(self, out_dir, name):
        for candidate in (out_dir / name, out_dir / "images" / name):
            if candidate.exists():
                return candidate
        return None
