// Application bootstrap: wires sliders, canvases and the URL together.

import { ApiClient, DeformScheduler, type DeformResponse, type Meta } from "./api.js";
import { decodeBase64, decodePgm } from "./pgm.js";
import { drawEvrChart, drawProbeBoxes, drawSlice } from "./render.js";
import {
  type ExplorerState,
  PRESET_LAMBDAS,
  SLIDER_RANGE,
  applyPreset,
  clampCoefficient,
  decodeState,
  encodeState,
  initialState,
  resetCoefficients,
  setCoefficient,
  visibleCount,
} from "./state.js";

const api = new ApiClient();

const el = {
  subject: document.getElementById("subject") as HTMLSelectElement,
  axis: document.getElementById("axis") as HTMLSelectElement,
  slice: document.getElementById("slice") as HTMLInputElement,
  sliceLabel: document.getElementById("slice-label") as HTMLSpanElement,
  sliders: document.getElementById("sliders") as HTMLDivElement,
  showAll: document.getElementById("show-all") as HTMLInputElement,
  reset: document.getElementById("reset") as HTMLButtonElement,
  presetComponent: document.getElementById("preset-component") as HTMLSelectElement,
  presets: document.getElementById("presets") as HTMLDivElement,
  canvas: document.getElementById("view") as HTMLCanvasElement,
  evr: document.getElementById("evr-chart") as HTMLCanvasElement,
  probe: document.getElementById("probe-chart") as HTMLCanvasElement,
  probePick: document.getElementById("probe-pick") as HTMLSelectElement,
  banner: document.getElementById("error-banner") as HTMLDivElement,
  stats: document.getElementById("jac-stats") as HTMLSpanElement,
};

let meta: Meta;
let state: ExplorerState;

function showError(message: string): void {
  el.banner.textContent = message;
  el.banner.style.display = "block";
}

function clearError(): void {
  el.banner.style.display = "none";
}

const scheduler = new DeformScheduler(
  (req) => api.deform(req),
  (resp) => {
    clearError();
    renderDeform(resp);
  },
  (err) => showError(`deform request failed: ${String(err)}`),
);

function renderDeform(resp: DeformResponse): void {
  const image = decodePgm(decodeBase64(resp.image_pgm));
  drawSlice(el.canvas, image, [...resp.contours_original, ...resp.contours_deformed]);
  const stats = resp.jacobian_stats;
  el.stats.textContent =
    `min det ${stats.min_det.toFixed(3)}, folding ${(stats.fold_fraction * 100).toFixed(2)}%`;
}

function pushUrl(): void {
  history.replaceState(null, "", `#${encodeState(state)}`);
}

function requestDeform(immediate = false): void {
  pushUrl();
  const req = {
    subject_id: state.subject,
    coefficients: state.coefficients,
    axis: state.axis,
    slice_index: state.sliceIndex,
  };
  if (immediate) scheduler.dispatch(req);
  else scheduler.request(req);
}

function buildSliders(): void {
  el.sliders.innerHTML = "";
  const count = visibleCount(state);
  for (let j = 0; j < count; j++) {
    const row = document.createElement("div");
    row.className = "slider-row";

    const label = document.createElement("label");
    label.textContent = `u${j + 1}`;

    const slider = document.createElement("input");
    slider.type = "range";
    slider.min = String(-SLIDER_RANGE);
    slider.max = String(SLIDER_RANGE);
    slider.step = "1";
    slider.value = String(state.coefficients[j]);

    const box = document.createElement("input");
    box.type = "number";
    box.value = String(state.coefficients[j]);

    const update = (raw: number) => {
      state = setCoefficient(state, j, raw);
      const v = state.coefficients[j];
      slider.value = String(v);
      box.value = String(v);
      requestDeform();
    };
    slider.addEventListener("input", () => update(Number(slider.value)));
    box.addEventListener("change", () => update(clampCoefficient(Number(box.value))));

    row.append(label, slider, box);
    el.sliders.append(row);
  }
}

function syncControls(): void {
  el.subject.value = state.subject;
  el.axis.value = String(state.axis);
  el.slice.max = String(meta.shape[state.axis] - 1);
  el.slice.value = String(state.sliceIndex);
  el.sliceLabel.textContent = String(state.sliceIndex);
  el.showAll.checked = state.showAll;
  buildSliders();
}

async function loadProbe(): Promise<void> {
  const kind = el.probePick.value;
  try {
    const probe = await api.probe(kind);
    drawProbeBoxes(el.probe, probe);
  } catch {
    const ctx = el.probe.getContext("2d");
    if (ctx) {
      ctx.clearRect(0, 0, el.probe.width, el.probe.height);
      ctx.fillStyle = "#9aa4b0";
      ctx.fillText(`no ${kind} probe computed`, 8, 20);
    }
  }
}

async function boot(): Promise<void> {
  try {
    meta = await api.meta();
  } catch (err) {
    showError(`API unavailable: ${String(err)}`);
    return;
  }

  const fromUrl = decodeState(location.hash.slice(1), meta.K);
  state = fromUrl && meta.subjects.includes(fromUrl.subject)
    ? fromUrl
    : initialState(meta.subjects[0], meta.K, Math.floor(meta.shape[0] / 2));

  for (const sid of meta.subjects) {
    const opt = document.createElement("option");
    opt.value = sid;
    opt.textContent = sid;
    el.subject.append(opt);
  }
  for (let j = 1; j <= meta.K; j++) {
    const opt = document.createElement("option");
    opt.value = String(j);
    opt.textContent = `u${j}`;
    el.presetComponent.append(opt);
  }
  for (const lambda of PRESET_LAMBDAS) {
    const button = document.createElement("button");
    button.textContent = String(lambda);
    button.addEventListener("click", () => {
      const j = Number(el.presetComponent.value) - 1;
      state = applyPreset(state, j, lambda);
      syncControls();
      requestDeform(true);
    });
    el.presets.append(button);
  }

  el.subject.addEventListener("change", () => {
    state = { ...state, subject: el.subject.value };
    requestDeform(true);
  });
  el.axis.addEventListener("change", () => {
    const axis = Number(el.axis.value);
    const limit = meta.shape[axis] - 1;
    state = { ...state, axis, sliceIndex: Math.min(state.sliceIndex, limit) };
    syncControls();
    requestDeform(true);
  });
  el.slice.addEventListener("input", () => {
    state = { ...state, sliceIndex: Number(el.slice.value) };
    el.sliceLabel.textContent = el.slice.value;
    requestDeform();
  });
  el.showAll.addEventListener("change", () => {
    state = { ...state, showAll: el.showAll.checked };
    syncControls();
    pushUrl();
  });
  el.reset.addEventListener("click", () => {
    state = resetCoefficients(state);
    syncControls();
    requestDeform(true);
  });
  el.probePick.addEventListener("change", () => void loadProbe());

  drawEvrChart(el.evr, meta.evr);
  void loadProbe();
  syncControls();
  requestDeform(true);
}

void boot();
