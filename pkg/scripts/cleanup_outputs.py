#!/usr/bin/env python3
import argparse
import shutil
from pathlib import Path

# 流水线产物（相对运行目录）
DEFAULT_PATHS = [
    Path('runs'),
    Path('.pytest_cache'),
]

ARTIFACT_PATTERNS = [
    '*.ckpt',
    'scorer.json',
    'wdm_monitor.log',
]


def collect_targets(root: Path, extra_paths=None, patterns=None):
    """收集要删除的目录与散落的产物文件"""
    targets = [root / p for p in DEFAULT_PATHS]
    if extra_paths:
        targets.extend(Path(p) for p in extra_paths)
    for pattern in list(ARTIFACT_PATTERNS) + list(patterns or []):
        targets.extend(p for p in root.glob(pattern) if p.is_file())
    return [p for p in dict.fromkeys(targets) if p.exists()]


def main():
    parser = argparse.ArgumentParser(description='Clean pipeline outputs and temporary artifacts.')
    parser.add_argument('--apply', action='store_true', help='Actually delete files/directories. Default is dry-run.')
    parser.add_argument('--root', type=Path, default=Path('.'), help='Directory to clean (default: .).')
    parser.add_argument('--paths', nargs='*', help='Additional paths to remove.')
    parser.add_argument('--patterns', nargs='*', help='Additional glob patterns for files to remove.')
    args = parser.parse_args()

    targets = collect_targets(args.root, args.paths, args.patterns)

    if not targets:
        print('Nothing to remove.' if args.apply else 'Dry-run. Nothing to remove.')
        return

    if args.apply:
        print('Removed:')
        for p in targets:
            if p.is_dir():
                shutil.rmtree(p)
            else:
                p.unlink()
            print('  -', p)
    else:
        print('Dry-run. Would remove:')
        for p in targets:
            print('  -', p)


if __name__ == '__main__':
    main()
