"""From an ico6 surface signal to the four-level token pyramid.

Run with ``python3 demos/tokens_and_windows.py``. Prints the icosphere
hierarchy, the sequence/window table and what the shifted window does to
window membership.
"""

import numpy as np

from mssit.icomesh import build_hierarchy
from mssit.patching import default_patch_maps, merge_tokens, sequence_from_surface, shift_index
from mssit.synth import regression_samples


def main():
    hierarchy = build_hierarchy(6)
    print("level  vertices  faces")
    for ico in hierarchy:
        print(f"ico{ico.level}  {ico.n_vertices:>8}  {ico.n_faces:>6}")

    maps = default_patch_maps(0.5)
    print("\ntoken level  tokens  windows  window size  shift")
    for level in (1, 2, 3, 4):
        print(
            f"{level:>11}  {maps.level_lengths[level]:>6}  {maps.n_windows(level):>7}  "
            f"{maps.window_size[level]:>11}  {maps.shift_offset[level]:>5}"
        )

    # One synthetic 4-channel cortical-like surface becomes 20480 tokens of 6 vertices x 4 channels.
    data = regression_samples(1, seed=0)[0].data
    seq = sequence_from_surface(data, maps)
    print(f"\nsurface {data.shape} -> level-1 sequence {seq.shape}")
    merged = merge_tokens(seq)
    print(f"merging groups of 4 sibling tokens -> {merged.shape}")

    # After the shift, the first window holds the second half of window 0 and the first half of window 1.
    wid = maps.window_id[1][shift_index(maps.level_lengths[1], maps.shift_offset[1])]
    print("\nwindow ids seen by shifted window 0:", np.unique(wid[:64], return_counts=True))


if __name__ == "__main__":
    main()
