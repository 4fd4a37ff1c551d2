import { readFileSync } from "node:fs";
import { describe, expect, it } from "vitest";

import { fitCamera, screenToWorld, worldToScreen } from "../src/bev.js";
import { FramePayloadSchema } from "../src/contracts.js";
import {
  buildPrompt,
  emptyPromptState,
  onClick,
  onDrag,
  onFrame,
  selectClass,
} from "../src/prompt.js";

const frame = FramePayloadSchema.parse(
  JSON.parse(
    readFileSync(new URL("../fixtures/frame.json", import.meta.url), "utf-8"),
  ),
);

const WIDTH = 320;
const HEIGHT = 240;
const camera = fitCamera(frame, WIDTH, HEIGHT);

function screenOf(index: number): [number, number] {
  const p = frame.points[index]!;
  return worldToScreen(camera, WIDTH, HEIGHT, p[0], p[1]);
}

function click(state: ReturnType<typeof emptyPromptState>, px: number, py: number) {
  return onClick(state, frame, camera, WIDTH, HEIGHT, px, py);
}

describe("click capture", () => {
  it("clicks are blocked until a class is selected", () => {
    const state = onFrame(emptyPromptState(), frame);
    const [sx, sy] = screenOf(0);
    const res = click(state, sx, sy);
    expect(res.outcome.kind).toBe("blocked");
    if (res.outcome.kind === "blocked") {
      expect(res.outcome.hint).toContain("select a class");
    }
    expect(res.state.pendingClicks).toEqual([]);
  });

  it("five distinct clicks collect five point indices, cleared on send", () => {
    let state = selectClass(onFrame(emptyPromptState(), frame), 4);
    const targets = [0, 50, 100, 200, 300];
    const collected: number[] = [];
    for (const i of targets) {
      const [sx, sy] = screenOf(i);
      const res = click(state, sx, sy);
      state = res.state;
      if (res.outcome.kind === "added") collected.push(res.outcome.pointIndex);
    }
    // coincident points may resolve to a neighbor, but every click lands
    expect(state.pendingClicks.length).toBe(collected.length);
    expect(new Set(state.pendingClicks).size).toBe(state.pendingClicks.length);
    expect(state.pendingClicks.length).toBeGreaterThanOrEqual(4);

    const built = buildPrompt(state);
    expect(built.ok).toBe(true);
    if (built.ok) {
      expect(built.payload.t).toBe(frame.t);
      expect(built.payload.class_id).toBe(4);
      expect(built.payload.point_indices).toEqual(state.pendingClicks);
      expect(built.payload.box).toBeNull();
      expect(built.state.pendingClicks).toEqual([]);
      expect(built.state.pendingBox).toBeNull();
      expect(built.state.selectedClass).toBe(4);
    }
  });

  it("repeated clicks on the same point are ignored", () => {
    let state = selectClass(onFrame(emptyPromptState(), frame), 4);
    const [sx, sy] = screenOf(10);
    state = click(state, sx, sy).state;
    const repeat = click(state, sx, sy);
    expect(repeat.outcome.kind).toBe("ignored");
    expect(repeat.state.pendingClicks.length).toBe(1);
  });

  it("clicks far from any point are ignored", () => {
    const state = selectClass(onFrame(emptyPromptState(), frame), 4);
    const res = click(state, -900, -900);
    expect(res.outcome.kind).toBe("ignored");
    expect(res.state.pendingClicks).toEqual([]);
  });
});

describe("box capture", () => {
  it("a drag stores the componentwise min/max box at the frame z extent", () => {
    let state = selectClass(onFrame(emptyPromptState(), frame), 5);
    // drag bottom-right to top-left in screen space
    state = onDrag(state, frame, camera, WIDTH, HEIGHT, 200, 180, 80, 40);
    expect(state.pendingBox).not.toBeNull();
    const box = state.pendingBox!;
    const [wxA, wyA] = screenToWorld(camera, WIDTH, HEIGHT, 200, 180);
    const [wxB, wyB] = screenToWorld(camera, WIDTH, HEIGHT, 80, 40);
    expect(box.min[0]).toBeCloseTo(Math.min(wxA, wxB), 10);
    expect(box.min[1]).toBeCloseTo(Math.min(wyA, wyB), 10);
    expect(box.max[0]).toBeCloseTo(Math.max(wxA, wxB), 10);
    expect(box.max[1]).toBeCloseTo(Math.max(wyA, wyB), 10);
    const zs = frame.points.map((p) => p[2]);
    expect(box.min[2]).toBe(Math.min(...zs));
    expect(box.max[2]).toBe(Math.max(...zs));
    expect(box.min[0]).toBeLessThanOrEqual(box.max[0]);
    expect(box.min[1]).toBeLessThanOrEqual(box.max[1]);

    const [sx, sy] = screenOf(0);
    state = click(state, sx, sy).state;
    const built = buildPrompt(state);
    expect(built.ok).toBe(true);
    if (built.ok) {
      expect(built.payload.box).toEqual({ min: box.min, max: box.max });
    }
  });
});

describe("frame transitions", () => {
  it("switching frames clears pending clicks and box", () => {
    let state = selectClass(onFrame(emptyPromptState(), frame), 4);
    const [sx, sy] = screenOf(0);
    state = click(state, sx, sy).state;
    state = onDrag(state, frame, camera, WIDTH, HEIGHT, 10, 10, 60, 60);
    expect(state.pendingClicks.length).toBe(1);

    const next = { ...frame, t: frame.t + 1 };
    state = onFrame(state, next);
    expect(state.frameT).toBe(frame.t + 1);
    expect(state.pendingClicks).toEqual([]);
    expect(state.pendingBox).toBeNull();
    expect(state.selectedClass).toBe(4);
  });

  it("re-binding the same frame keeps pending state", () => {
    let state = selectClass(onFrame(emptyPromptState(), frame), 4);
    const [sx, sy] = screenOf(0);
    state = click(state, sx, sy).state;
    const same = onFrame(state, frame);
    expect(same.pendingClicks.length).toBe(1);
  });
});

describe("send validation", () => {
  it("sending without clicks or class yields hints", () => {
    const noClass = buildPrompt(onFrame(emptyPromptState(), frame));
    expect(noClass.ok).toBe(false);
    if (!noClass.ok) expect(noClass.hint).toContain("class");

    const noClicks = buildPrompt(
      selectClass(onFrame(emptyPromptState(), frame), 4),
    );
    expect(noClicks.ok).toBe(false);
    if (!noClicks.ok) expect(noClicks.hint).toContain("point");

    const noFrame = buildPrompt(selectClass(emptyPromptState(), 4));
    expect(noFrame.ok).toBe(false);
  });
});
