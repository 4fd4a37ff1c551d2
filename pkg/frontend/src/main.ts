/**
 * Browser shell: wires the pure rendering/prompting/metrics modules to the
 * DOM and the session service. All engine state stays server-side; the page
 * only holds view state and pending prompt selections.
 */

import {
  Camera,
  ColorMode,
  fitCamera,
  nearestPointWithin,
  renderBev,
} from "./bev.js";
import {
  FramePayload,
  parseFrame,
  PromptResponseSchema,
} from "./contracts.js";
import {
  applyEvent,
  emptyMetricsState,
  MetricsState,
  promptBudget,
  status,
} from "./metrics.js";
import {
  buildPrompt,
  emptyPromptState,
  onClick,
  onDrag,
  onFrame,
  PromptState,
  selectClass,
} from "./prompt.js";
import { StreamClient } from "./sse.js";

const WIDTH = 800;
const HEIGHT = 600;

interface Ui {
  canvas: HTMLCanvasElement;
  ctx: CanvasRenderingContext2D;
  banner: HTMLElement;
  statusEl: HTMLElement;
  metricsEl: HTMLElement;
  classSelect: HTMLSelectElement;
  modeSelect: HTMLSelectElement;
  sendButton: HTMLButtonElement;
  hoverEl: HTMLElement;
}

let frame: FramePayload | null = null;
let camera: Camera | null = null;
let promptState: PromptState = emptyPromptState();
let metrics: MetricsState = emptyMetricsState(6);
let colorMode: ColorMode = "prediction_xm";
let dragStart: [number, number] | null = null;
let pI = 0.01;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function showBanner(ui: Ui, message: string): void {
  ui.banner.textContent = message;
  ui.banner.style.display = message ? "block" : "none";
}

function redraw(ui: Ui): void {
  if (!frame || !camera) return;
  const buf = renderBev(frame, {
    width: WIDTH,
    height: HEIGHT,
    camera,
    colorMode,
    highlighted: promptState.pendingClicks,
    box: promptState.pendingBox
      ? {
          min: [promptState.pendingBox.min[0], promptState.pendingBox.min[1]],
          max: [promptState.pendingBox.max[0], promptState.pendingBox.max[1]],
        }
      : null,
    pointRadius: 1,
  });
  const pixels = new Uint8ClampedArray(buf.length);
  pixels.set(buf);
  ui.ctx.putImageData(new ImageData(pixels, WIDTH, HEIGHT), 0, 0);
}

function renderMetrics(ui: Ui): void {
  const st = status(metrics);
  const parts = [`status: ${st}`];
  if (metrics.lastT !== null) parts.push(`frame: ${metrics.lastT}`);
  if (metrics.runningMeanMiou !== null) {
    parts.push(`running mIoU: ${metrics.runningMeanMiou.toFixed(4)}`);
  }
  const budget = promptBudget(metrics, pI);
  parts.push(
    `prompts: ${budget.used} used (${metrics.promptsHuman} human) / ` +
      `${budget.expected.toFixed(1)} expected`,
  );
  const perClass = metrics.runningPerClass
    .map((v, c) => `${c}:${v === null ? "–" : v.toFixed(3)}`)
    .join(" ");
  parts.push(`per-class IoU: ${perClass}`);
  ui.metricsEl.textContent = parts.join(" | ");
}

async function fetchFrame(ui: Ui, path: string): Promise<void> {
  try {
    const res = await fetch(path);
    if (!res.ok) return;
    const parsed = parseFrame(await res.json());
    if (!parsed.ok) {
      showBanner(ui, `malformed frame payload: ${parsed.error}`);
      return;
    }
    frame = parsed.value;
    if (!camera) camera = fitCamera(frame, WIDTH, HEIGHT);
    promptState = onFrame(promptState, frame);
    fillClassSelect(ui, frame.classes);
    redraw(ui);
  } catch (err) {
    showBanner(ui, `frame fetch failed: ${String(err)}`);
  }
}

let classOptionsFilled = false;

function fillClassSelect(ui: Ui, classes: readonly string[]): void {
  if (classOptionsFilled) return;
  classOptionsFilled = true;
  for (let c = 0; c < classes.length; c++) {
    const opt = document.createElement("option");
    opt.value = String(c);
    opt.textContent = `${c}: ${classes[c]}`;
    ui.classSelect.appendChild(opt);
  }
}

async function sendPrompt(ui: Ui): Promise<void> {
  const built = buildPrompt(promptState);
  if (!built.ok) {
    showBanner(ui, built.hint);
    return;
  }
  try {
    const res = await fetch("/api/prompt", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(built.payload),
    });
    if (!res.ok) {
      const body = await res.json().catch(() => ({}));
      showBanner(
        ui,
        `prompt rejected (${res.status}): ${body.detail ?? "unknown error"}`,
      );
      return;
    }
    const outcome = PromptResponseSchema.safeParse(await res.json());
    if (outcome.success && outcome.data.accepted) {
      showBanner(ui, `prompt applied at frame ${outcome.data.applied_at_t}`);
      promptState = built.state;
      redraw(ui);
    } else {
      showBanner(ui, "prompt expired before it could be applied");
    }
  } catch (err) {
    showBanner(ui, `prompt post failed: ${String(err)}`);
  }
}

function wireCanvas(ui: Ui): void {
  ui.canvas.addEventListener("mousedown", (ev) => {
    dragStart = [ev.offsetX, ev.offsetY];
  });
  ui.canvas.addEventListener("mouseup", (ev) => {
    if (!frame || !camera || !dragStart) return;
    const [sx, sy] = dragStart;
    dragStart = null;
    const dx = ev.offsetX - sx;
    const dy = ev.offsetY - sy;
    if (dx * dx + dy * dy >= 25) {
      promptState = onDrag(
        promptState, frame, camera, WIDTH, HEIGHT, sx, sy,
        ev.offsetX, ev.offsetY,
      );
      redraw(ui);
      return;
    }
    const result = onClick(
      promptState, frame, camera, WIDTH, HEIGHT, ev.offsetX, ev.offsetY,
    );
    promptState = result.state;
    if (result.outcome.kind === "blocked") {
      showBanner(ui, result.outcome.hint);
    } else if (result.outcome.kind === "added") {
      showBanner(ui, "");
      redraw(ui);
    }
  });
  ui.canvas.addEventListener("mousemove", (ev) => {
    if (!frame || !camera) return;
    const idx = nearestPointWithin(
      frame, camera, WIDTH, HEIGHT, ev.offsetX, ev.offsetY, 8,
    );
    ui.hoverEl.textContent =
      idx === null
        ? ""
        : `point ${idx}: ${frame.classes[frame.pred_xm[idx]!] ?? "?"}`;
  });
  ui.canvas.addEventListener("wheel", (ev) => {
    if (!camera) return;
    ev.preventDefault();
    camera = {
      ...camera,
      scale: camera.scale * (ev.deltaY > 0 ? 1.2 : 1 / 1.2),
    };
    redraw(ui);
  });
}

async function boot(): Promise<void> {
  const ui: Ui = {
    canvas: el<HTMLCanvasElement>("bev"),
    ctx: el<HTMLCanvasElement>("bev").getContext("2d")!,
    banner: el("banner"),
    statusEl: el("status"),
    metricsEl: el("metrics"),
    classSelect: el<HTMLSelectElement>("class-select"),
    modeSelect: el<HTMLSelectElement>("mode-select"),
    sendButton: el<HTMLButtonElement>("send"),
    hoverEl: el("hover"),
  };
  ui.canvas.width = WIDTH;
  ui.canvas.height = HEIGHT;

  try {
    const cfg = await (await fetch("/api/config")).json();
    pI = cfg?.itta?.p_i ?? 0.01;
  } catch {
    /* default budget rate */
  }

  ui.classSelect.addEventListener("change", () => {
    const v = ui.classSelect.value;
    promptState = selectClass(promptState, v === "" ? null : Number(v));
  });
  ui.modeSelect.addEventListener("change", () => {
    colorMode = ui.modeSelect.value as ColorMode;
    redraw(ui);
  });
  ui.sendButton.addEventListener("click", () => void sendPrompt(ui));
  wireCanvas(ui);

  const client = new StreamClient({
    url: "/api/events",
    factory: (url) => new EventSource(url) as unknown as import("./sse.js").EventSourceLike,
    onEvent: (event) => {
      metrics = applyEvent(metrics, event);
      renderMetrics(ui);
      void fetchFrame(ui, `/api/frame/${event.t}`);
    },
    onStatus: (s) => {
      ui.statusEl.textContent = s;
    },
    onEnd: () => {
      ui.statusEl.textContent = "run finished";
    },
  });
  client.connect();
  renderMetrics(ui);
  void fetchFrame(ui, "/api/frame/latest");
}

if (typeof document !== "undefined") {
  void boot();
}
