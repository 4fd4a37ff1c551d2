/**
 * Live metric aggregation over the event stream: per-class IoU series,
 * running mean fused mIoU, and the prompt budget relative to the expected
 * p_i * t simulated rate.
 */

import { StreamEvent } from "./contracts.js";

export interface SeriesPoint {
  t: number;
  value: number;
}

export interface MetricsState {
  /** chart x-axis; strictly increasing frame times */
  times: number[];
  mIoUSeries: SeriesPoint[];
  perClassSeries: SeriesPoint[][];
  /** running mean of the fused mIoU over all received frames */
  runningMeanMiou: number | null;
  /** running mean per class, ignoring frames where a class was absent */
  runningPerClass: (number | null)[];
  promptsConsumed: number;
  promptsHuman: number;
  framesReceived: number;
  lastT: number | null;
  done: boolean;
}

export function emptyMetricsState(nClasses: number): MetricsState {
  return {
    times: [],
    mIoUSeries: [],
    perClassSeries: Array.from({ length: nClasses }, () => []),
    runningMeanMiou: null,
    runningPerClass: Array.from({ length: nClasses }, () => null),
    promptsConsumed: 0,
    promptsHuman: 0,
    framesReceived: 0,
    lastT: null,
    done: false,
  };
}

export type Status = "waiting" | "streaming" | "done";

export function status(state: MetricsState): Status {
  if (state.done) return "done";
  return state.framesReceived === 0 ? "waiting" : "streaming";
}

interface RunningMeans {
  miouSum: number;
  miouN: number;
  classSum: number[];
  classN: number[];
}

const meanCache = new WeakMap<MetricsState, RunningMeans>();

function means(state: MetricsState, nClasses: number): RunningMeans {
  let m = meanCache.get(state);
  if (!m) {
    m = {
      miouSum: 0,
      miouN: 0,
      classSum: Array.from({ length: nClasses }, () => 0),
      classN: Array.from({ length: nClasses }, () => 0),
    };
    meanCache.set(state, m);
  }
  return m;
}

/**
 * Fold one event into the state. Events must arrive with strictly
 * increasing t; a stale or duplicate t is dropped so the x-axis never goes
 * backwards.
 */
export function applyEvent(
  state: MetricsState,
  event: StreamEvent,
): MetricsState {
  if (state.lastT !== null && event.t <= state.lastT) return state;
  const m = event.metrics;
  const nClasses = Math.max(state.perClassSeries.length,
    m.per_class_iou.length);
  const next: MetricsState = {
    ...state,
    times: [...state.times, event.t],
    mIoUSeries: [...state.mIoUSeries],
    perClassSeries: Array.from({ length: nClasses }, (_, c) =>
      [...(state.perClassSeries[c] ?? [])]),
    runningPerClass: [...state.runningPerClass],
    promptsConsumed: m.prompts_consumed,
    promptsHuman: m.prompts_human,
    framesReceived: state.framesReceived + 1,
    lastT: event.t,
    done: m.done ?? state.done,
  };
  while (next.runningPerClass.length < nClasses) {
    next.runningPerClass.push(null);
  }
  const acc = means(state, nClasses);
  const nextAcc: RunningMeans = {
    miouSum: acc.miouSum,
    miouN: acc.miouN,
    classSum: [...acc.classSum],
    classN: [...acc.classN],
  };
  while (nextAcc.classSum.length < nClasses) {
    nextAcc.classSum.push(0);
    nextAcc.classN.push(0);
  }
  if (m.miou_xm !== null) {
    next.mIoUSeries.push({ t: event.t, value: m.miou_xm });
    nextAcc.miouSum += m.miou_xm;
    nextAcc.miouN += 1;
  }
  next.runningMeanMiou =
    nextAcc.miouN > 0 ? nextAcc.miouSum / nextAcc.miouN : null;
  m.per_class_iou.forEach((v, c) => {
    if (v !== null) {
      next.perClassSeries[c]!.push({ t: event.t, value: v });
      nextAcc.classSum[c]! += v;
      nextAcc.classN[c]! += 1;
    }
    next.runningPerClass[c] =
      nextAcc.classN[c]! > 0 ? nextAcc.classSum[c]! / nextAcc.classN[c]! : null;
  });
  meanCache.set(next, nextAcc);
  return next;
}

export interface PromptBudget {
  used: number;
  expected: number;
}

/** Prompts used vs the expected simulated budget p_i * frames seen. */
export function promptBudget(state: MetricsState, pI: number): PromptBudget {
  return {
    used: state.promptsConsumed,
    expected: pI * state.framesReceived,
  };
}
