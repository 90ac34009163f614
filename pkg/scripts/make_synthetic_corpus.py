"""Write random quantized songs as note-list files, ready for build-vocab and encode."""

import argparse
from pathlib import Path

import numpy as np

from trackdiff.codec import INSTRUMENTS, Track
from trackdiff.ingest import write_note_list
from trackdiff.synthetic import random_song


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--songs", type=int, default=16)
    parser.add_argument("--bars", type=int, default=4)
    parser.add_argument("--density", type=float, default=0.25)
    parser.add_argument("--max-group", type=int, default=2)
    parser.add_argument("--pitch-choices", type=int, default=6)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = np.random.default_rng(args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    others = [t for t in INSTRUMENTS if t != Track.MELODY]
    for i in range(args.songs):
        # melody is always present so the song passes the ingest filters
        extra = rng.choice(len(others), size=int(rng.integers(1, len(others) + 1)), replace=False)
        tracks = [Track.MELODY] + [others[j] for j in sorted(extra)]
        song = random_song(rng, bars=args.bars, tracks=tracks, chords=False, density=args.density,
                           max_group=args.max_group, pitch_choices=args.pitch_choices)
        (out / f"song_{i:03d}.txt").write_text(write_note_list(song))
    print(f"wrote {args.songs} songs to {out}")


if __name__ == "__main__":
    main()
