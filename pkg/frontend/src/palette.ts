/**
 * Fixed class palette. Documented and frozen so golden-image tests stay
 * stable; index = class id.
 *
 *   0 road        dark gray   #505050
 *   1 building    slate blue  #3c78b4
 *   2 vegetation  green       #32a02d
 *   3 vehicle     orange      #ff7f0e
 *   4 pedestrian  red         #e31a1c
 *   5 bicycle     purple      #9a3cc8
 *
 * Classes beyond the table wrap around. Entropy mode uses a perceptual
 * two-stop ramp from deep blue (0 nats) to yellow (ln K nats).
 */

export type RGB = readonly [number, number, number];

export const CLASS_PALETTE: readonly RGB[] = [
  [0x50, 0x50, 0x50],
  [0x3c, 0x78, 0xb4],
  [0x32, 0xa0, 0x2d],
  [0xff, 0x7f, 0x0e],
  [0xe3, 0x1a, 0x1c],
  [0x9a, 0x3c, 0xc8],
];

export const BACKGROUND: RGB = [0x10, 0x10, 0x14];
export const HIGHLIGHT: RGB = [0xff, 0xff, 0xff];
export const BOX_COLOR: RGB = [0x00, 0xe5, 0xff];

const ENTROPY_LOW: RGB = [0x20, 0x30, 0x90];
const ENTROPY_HIGH: RGB = [0xff, 0xe0, 0x20];

export function classColor(classId: number): RGB {
  const idx =
    ((classId % CLASS_PALETTE.length) + CLASS_PALETTE.length) %
    CLASS_PALETTE.length;
  return CLASS_PALETTE[idx]!;
}

/** Linear ramp over [0, maxEntropy]; values outside are clamped. */
export function entropyColor(value: number, maxEntropy: number): RGB {
  const span = maxEntropy > 0 ? maxEntropy : 1;
  const u = Math.min(1, Math.max(0, value / span));
  return [
    Math.round(ENTROPY_LOW[0] + u * (ENTROPY_HIGH[0] - ENTROPY_LOW[0])),
    Math.round(ENTROPY_LOW[1] + u * (ENTROPY_HIGH[1] - ENTROPY_LOW[1])),
    Math.round(ENTROPY_LOW[2] + u * (ENTROPY_HIGH[2] - ENTROPY_LOW[2])),
  ];
}
