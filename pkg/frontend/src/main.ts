/** DOM wiring for the alpha tuner page. */

import { TunerApi } from "./api.js";
import { severityColor, severityGrid } from "./heatmap.js";
import {
  ALPHA_MAX,
  ALPHA_MIN,
  ALPHA_STEP,
  DEFAULT_ALPHA,
  PRESET_ALPHAS,
  TunerController,
  TunerState,
} from "./tuner.js";

const baseUrl = (window as unknown as { TUNER_BASE_URL?: string }).TUNER_BASE_URL ?? "http://127.0.0.1:8080";
const controller = new TunerController(new TunerApi(baseUrl));

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

const fileInput = el<HTMLInputElement>("file-input");
const slider = el<HTMLInputElement>("alpha-slider");
const alphaLabel = el<HTMLSpanElement>("alpha-value");
const banner = el<HTMLDivElement>("banner");
const inputPane = el<HTMLImageElement>("pane-input");
const tunedPane = el<HTMLImageElement>("pane-tuned");
const fullPane = el<HTMLImageElement>("pane-full");
const overlay = el<HTMLCanvasElement>("overlay");
const overlayToggle = el<HTMLInputElement>("overlay-toggle");
const presetsBox = el<HTMLDivElement>("presets");

slider.min = String(ALPHA_MIN);
slider.max = String(ALPHA_MAX);
slider.step = String(ALPHA_STEP);
slider.value = String(DEFAULT_ALPHA);

for (const preset of PRESET_ALPHAS) {
  const button = document.createElement("button");
  button.textContent = `α = ${preset}`;
  button.addEventListener("click", () => {
    slider.value = String(preset);
    controller.preset(preset);
  });
  presetsBox.appendChild(button);
}

const urls = new Map<string, string>();

function showBytes(img: HTMLImageElement, key: string, bytes: ArrayBuffer | null): void {
  if (bytes === null) {
    img.removeAttribute("src");
    return;
  }
  const old = urls.get(key);
  if (old !== undefined) {
    URL.revokeObjectURL(old);
  }
  const url = URL.createObjectURL(new Blob([bytes], { type: "image/png" }));
  urls.set(key, url);
  img.src = url;
}

function drawOverlay(state: TunerState): void {
  const ctx = overlay.getContext("2d");
  if (ctx === null) {
    return;
  }
  ctx.clearRect(0, 0, overlay.width, overlay.height);
  if (!state.overlayVisible || state.degradation === null) {
    overlay.style.display = "none";
    return;
  }
  overlay.style.display = "block";
  const grid = severityGrid(state.degradation);
  const n = grid.length;
  const cw = overlay.width / n;
  const ch = overlay.height / n;
  grid.forEach((row, i) => {
    row.forEach((severity, j) => {
      const { r, g, b, a } = severityColor(severity);
      ctx.fillStyle = `rgba(${r}, ${g}, ${b}, ${a})`;
      ctx.fillRect(j * cw, i * ch, cw, ch);
    });
  });
}

controller.subscribe((state) => {
  alphaLabel.textContent = state.displayed === null ? "–" : state.displayed.alpha.toFixed(2);
  banner.style.display = state.banner === null ? "none" : "block";
  banner.textContent = state.banner ?? "";
  showBytes(inputPane, "input", state.inputImage);
  showBytes(tunedPane, "tuned", state.displayed?.bytes ?? null);
  showBytes(fullPane, "full", state.fullDetail);
  drawOverlay(state);
});

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (file === undefined) {
    return;
  }
  await controller.upload(await file.arrayBuffer());
});

slider.addEventListener("input", () => {
  controller.setAlpha(Number.parseFloat(slider.value));
});

overlayToggle.addEventListener("change", () => {
  controller.toggleOverlay();
});
