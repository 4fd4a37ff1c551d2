/**
 * Pure bird's-eye-view rasterizer. No DOM: it fills an RGBA pixel buffer
 * that the browser shell blits onto a canvas and that tests hash directly.
 * World x maps to screen x, world y to screen y (y axis flipped so +y is
 * up); z is ignored except in entropy/hit-testing metadata.
 */

import { FramePayload } from "./contracts.js";
import {
  BACKGROUND,
  BOX_COLOR,
  classColor,
  entropyColor,
  HIGHLIGHT,
  RGB,
} from "./palette.js";

export type ColorMode =
  | "prediction_xm"
  | "prediction_2d"
  | "prediction_3d"
  | "ground_truth"
  | "entropy";

export interface Camera {
  /** world units per pixel */
  scale: number;
  /** world coordinates at the canvas center */
  centerX: number;
  centerY: number;
}

export interface RenderOptions {
  width: number;
  height: number;
  camera: Camera;
  colorMode: ColorMode;
  /** point indices drawn with a highlight ring */
  highlighted?: readonly number[];
  /** pending BEV box in world coordinates, drawn as an outline */
  box?: { min: [number, number]; max: [number, number] } | null;
  /** point radius in pixels */
  pointRadius?: number;
}

export function worldToScreen(
  camera: Camera,
  width: number,
  height: number,
  x: number,
  y: number,
): [number, number] {
  return [
    width / 2 + (x - camera.centerX) / camera.scale,
    height / 2 - (y - camera.centerY) / camera.scale,
  ];
}

export function screenToWorld(
  camera: Camera,
  width: number,
  height: number,
  px: number,
  py: number,
): [number, number] {
  return [
    camera.centerX + (px - width / 2) * camera.scale,
    camera.centerY - (py - height / 2) * camera.scale,
  ];
}

/** Camera that fits every point of the frame with a small margin. */
export function fitCamera(
  frame: FramePayload,
  width: number,
  height: number,
): Camera {
  let minX = Infinity;
  let maxX = -Infinity;
  let minY = Infinity;
  let maxY = -Infinity;
  for (const p of frame.points) {
    minX = Math.min(minX, p[0]);
    maxX = Math.max(maxX, p[0]);
    minY = Math.min(minY, p[1]);
    maxY = Math.max(maxY, p[1]);
  }
  const spanX = Math.max(maxX - minX, 1e-6);
  const spanY = Math.max(maxY - minY, 1e-6);
  const scale = Math.max(spanX / (width * 0.9), spanY / (height * 0.9));
  return {
    scale,
    centerX: (minX + maxX) / 2,
    centerY: (minY + maxY) / 2,
  };
}

function pointColor(
  frame: FramePayload,
  mode: ColorMode,
  index: number,
): RGB {
  switch (mode) {
    case "prediction_xm":
      return classColor(frame.pred_xm[index]!);
    case "prediction_2d":
      return classColor(frame.pred_2d[index]!);
    case "prediction_3d":
      return classColor(frame.pred_3d[index]!);
    case "ground_truth":
      return classColor(frame.gt[index]!);
    case "entropy": {
      const maxE = Math.log(frame.classes.length);
      const e = (frame.ent_2d[index]! + frame.ent_3d[index]!) / 2;
      return entropyColor(e, maxE);
    }
  }
}

function putPixel(
  buf: Uint8ClampedArray,
  width: number,
  height: number,
  px: number,
  py: number,
  rgb: RGB,
): void {
  if (px < 0 || py < 0 || px >= width || py >= height) return;
  const o = (py * width + px) * 4;
  buf[o] = rgb[0];
  buf[o + 1] = rgb[1];
  buf[o + 2] = rgb[2];
  buf[o + 3] = 255;
}

function fillDisc(
  buf: Uint8ClampedArray,
  width: number,
  height: number,
  cx: number,
  cy: number,
  radius: number,
  rgb: RGB,
): void {
  const r = Math.max(0, radius);
  for (let dy = -r; dy <= r; dy++) {
    for (let dx = -r; dx <= r; dx++) {
      if (dx * dx + dy * dy <= r * r) {
        putPixel(buf, width, height, cx + dx, cy + dy, rgb);
      }
    }
  }
}

function strokeRect(
  buf: Uint8ClampedArray,
  width: number,
  height: number,
  x0: number,
  y0: number,
  x1: number,
  y1: number,
  rgb: RGB,
): void {
  const [lx, hx] = x0 <= x1 ? [x0, x1] : [x1, x0];
  const [ly, hy] = y0 <= y1 ? [y0, y1] : [y1, y0];
  for (let x = lx; x <= hx; x++) {
    putPixel(buf, width, height, x, ly, rgb);
    putPixel(buf, width, height, x, hy, rgb);
  }
  for (let y = ly; y <= hy; y++) {
    putPixel(buf, width, height, lx, y, rgb);
    putPixel(buf, width, height, hx, y, rgb);
  }
}

/**
 * Rasterize one frame. Deterministic: same payload and options produce the
 * same buffer, which golden tests hash.
 */
export function renderBev(
  frame: FramePayload,
  options: RenderOptions,
): Uint8ClampedArray {
  const { width, height, camera, colorMode } = options;
  const radius = options.pointRadius ?? 1;
  const buf = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < width * height; i++) {
    const o = i * 4;
    buf[o] = BACKGROUND[0];
    buf[o + 1] = BACKGROUND[1];
    buf[o + 2] = BACKGROUND[2];
    buf[o + 3] = 255;
  }
  for (let i = 0; i < frame.points.length; i++) {
    const p = frame.points[i]!;
    const [sx, sy] = worldToScreen(camera, width, height, p[0], p[1]);
    fillDisc(buf, width, height, Math.round(sx), Math.round(sy), radius,
      pointColor(frame, colorMode, i));
  }
  for (const i of options.highlighted ?? []) {
    const p = frame.points[i];
    if (!p) continue;
    const [sx, sy] = worldToScreen(camera, width, height, p[0], p[1]);
    fillDisc(buf, width, height, Math.round(sx), Math.round(sy), radius + 2,
      HIGHLIGHT);
    fillDisc(buf, width, height, Math.round(sx), Math.round(sy), radius,
      pointColor(frame, colorMode, i));
  }
  if (options.box) {
    const [x0, y0] = worldToScreen(camera, width, height,
      options.box.min[0], options.box.min[1]);
    const [x1, y1] = worldToScreen(camera, width, height,
      options.box.max[0], options.box.max[1]);
    strokeRect(buf, width, height, Math.round(x0), Math.round(y0),
      Math.round(x1), Math.round(y1), BOX_COLOR);
  }
  return buf;
}

/**
 * Index of the rendered point nearest to a screen position, or null when
 * none lies within `maxDistPx` pixels.
 */
export function nearestPointWithin(
  frame: FramePayload,
  camera: Camera,
  width: number,
  height: number,
  px: number,
  py: number,
  maxDistPx: number,
): number | null {
  let best = -1;
  let bestD2 = maxDistPx * maxDistPx;
  for (let i = 0; i < frame.points.length; i++) {
    const p = frame.points[i]!;
    const [sx, sy] = worldToScreen(camera, width, height, p[0], p[1]);
    const d2 = (sx - px) * (sx - px) + (sy - py) * (sy - py);
    if (d2 <= bestD2) {
      bestD2 = d2;
      best = i;
    }
  }
  return best >= 0 ? best : null;
}

/** FNV-1a hash of the pixel buffer, hex-encoded; used by golden tests. */
export function bufferHash(buf: Uint8ClampedArray): string {
  let h = 0x811c9dc5;
  for (let i = 0; i < buf.length; i++) {
    h ^= buf[i]!;
    h = Math.imul(h, 0x01000193) >>> 0;
  }
  return h.toString(16).padStart(8, "0");
}
