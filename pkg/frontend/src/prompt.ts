/**
 * Prompt capture: turns clicks and drags on the BEV view into a validated
 * PromptPayload. Pending clicks always refer to points of the frame being
 * displayed; switching frames clears them.
 */

import {
  Camera,
  nearestPointWithin,
  screenToWorld,
} from "./bev.js";
import {
  FramePayload,
  PromptPayload,
  PromptPayloadSchema,
} from "./contracts.js";

export const CLICK_RADIUS_PX = 8;

export interface PendingBox {
  min: [number, number, number];
  max: [number, number, number];
}

export interface PromptState {
  frameT: number | null;
  selectedClass: number | null;
  pendingClicks: number[];
  pendingBox: PendingBox | null;
}

export function emptyPromptState(): PromptState {
  return {
    frameT: null,
    selectedClass: null,
    pendingClicks: [],
    pendingBox: null,
  };
}

export type ClickOutcome =
  | { kind: "added"; pointIndex: number }
  | { kind: "ignored" }
  | { kind: "blocked"; hint: string };

/** Bind pending state to a (new) frame; stale selections are dropped. */
export function onFrame(state: PromptState, frame: FramePayload): PromptState {
  if (state.frameT === frame.t) return state;
  return {
    ...state,
    frameT: frame.t,
    pendingClicks: [],
    pendingBox: null,
  };
}

export function selectClass(
  state: PromptState,
  classId: number | null,
): PromptState {
  return { ...state, selectedClass: classId };
}

/**
 * A click appends the screen-space-nearest point within 8 px; clicks far
 * from any point are ignored, clicks without a selected class are blocked.
 */
export function onClick(
  state: PromptState,
  frame: FramePayload,
  camera: Camera,
  width: number,
  height: number,
  px: number,
  py: number,
): { state: PromptState; outcome: ClickOutcome } {
  if (state.selectedClass === null) {
    return {
      state,
      outcome: {
        kind: "blocked",
        hint: "select a class of interest before clicking points",
      },
    };
  }
  const idx = nearestPointWithin(
    frame, camera, width, height, px, py, CLICK_RADIUS_PX,
  );
  if (idx === null) return { state, outcome: { kind: "ignored" } };
  if (state.pendingClicks.includes(idx)) {
    return { state, outcome: { kind: "ignored" } };
  }
  return {
    state: { ...state, pendingClicks: [...state.pendingClicks, idx] },
    outcome: { kind: "added", pointIndex: idx },
  };
}

/**
 * A BEV drag becomes an axis-aligned box: componentwise min/max of the two
 * corners in world xy, lifted to the frame's full z extent.
 */
export function onDrag(
  state: PromptState,
  frame: FramePayload,
  camera: Camera,
  width: number,
  height: number,
  x1: number,
  y1: number,
  x2: number,
  y2: number,
): PromptState {
  const [wx1, wy1] = screenToWorld(camera, width, height, x1, y1);
  const [wx2, wy2] = screenToWorld(camera, width, height, x2, y2);
  let zMin = Infinity;
  let zMax = -Infinity;
  for (const p of frame.points) {
    zMin = Math.min(zMin, p[2]);
    zMax = Math.max(zMax, p[2]);
  }
  const box: PendingBox = {
    min: [Math.min(wx1, wx2), Math.min(wy1, wy2), zMin],
    max: [Math.max(wx1, wx2), Math.max(wy1, wy2), zMax],
  };
  return { ...state, pendingBox: box };
}

export type BuildOutcome =
  | { ok: true; payload: PromptPayload; state: PromptState }
  | { ok: false; hint: string };

/**
 * Assemble and schema-validate the payload for "send"; on success the
 * pending clicks and box are cleared (the class selection persists).
 */
export function buildPrompt(
  state: PromptState,
  clientId = "operator-ui",
): BuildOutcome {
  if (state.selectedClass === null) {
    return { ok: false, hint: "no class selected" };
  }
  if (state.frameT === null) {
    return { ok: false, hint: "no frame displayed" };
  }
  if (state.pendingClicks.length === 0) {
    return { ok: false, hint: "click at least one point" };
  }
  const candidate = {
    t: state.frameT,
    class_id: state.selectedClass,
    point_indices: [...state.pendingClicks],
    box: state.pendingBox
      ? { min: state.pendingBox.min, max: state.pendingBox.max }
      : null,
    client_id: clientId,
  };
  const parsed = PromptPayloadSchema.safeParse(candidate);
  if (!parsed.success) {
    return {
      ok: false,
      hint: parsed.error.issues[0]?.message ?? "invalid prompt",
    };
  }
  return {
    ok: true,
    payload: parsed.data,
    state: { ...state, pendingClicks: [], pendingBox: null },
  };
}
