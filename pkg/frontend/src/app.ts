/**
 * Single-page wiring: upload-and-predict, the explain panel with its
 * append-only history, and the impressions job panel. All numbers on
 * screen come from service responses; the only client-side math is the
 * alpha re-blend (blend.ts), which reproduces the server overlay from the
 * served raw grid and base image.
 */

import { api, ServiceError, TopkEntry } from "./api";
import { reblend, rgbToRgba } from "./blend";
import { pollJob } from "./poll";
import { drawSparkline } from "./sparkline";
import {
  Action,
  canExplain,
  HistoryCard,
  initialState,
  reduce,
  SessionState,
} from "./state";

let state: SessionState = initialState();

function dispatch(action: Action): void {
  state = reduce(state, action);
  render();
}

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) {
    throw new Error(`missing element #${id}`);
  }
  return el as T;
};

// ---------------------------------------------------------------- helpers

function noticeArea(): HTMLElement {
  return $("notice");
}

function showError(err: unknown): void {
  const msg =
    err instanceof ServiceError
      ? `${err.code}: ${err.message}`
      : String(err);
  dispatch({ kind: "notice", message: msg });
}

async function fileToBase64(file: File): Promise<string> {
  const buf = new Uint8Array(await file.arrayBuffer());
  let binary = "";
  for (let i = 0; i < buf.length; i += 0x8000) {
    binary += String.fromCharCode(...buf.subarray(i, i + 0x8000));
  }
  return btoa(binary);
}

function pngUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

function decodeToRgb(
  b64: string,
  width: number,
  height: number,
): Promise<Uint8ClampedArray> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => {
      const canvas = document.createElement("canvas");
      canvas.width = width;
      canvas.height = height;
      const ctx = canvas.getContext("2d")!;
      ctx.drawImage(img, 0, 0);
      const rgba = ctx.getImageData(0, 0, width, height).data;
      const rgb = new Uint8ClampedArray(width * height * 3);
      for (let i = 0; i < width * height; i++) {
        rgb[i * 3] = rgba[i * 4];
        rgb[i * 3 + 1] = rgba[i * 4 + 1];
        rgb[i * 3 + 2] = rgba[i * 4 + 2];
      }
      resolve(rgb);
    };
    img.onerror = () => reject(new Error("could not decode served PNG"));
    img.src = pngUrl(b64);
  });
}

// ------------------------------------------------------------ upload flow

async function onUpload(file: File): Promise<void> {
  try {
    const b64 = await fileToBase64(file);
    dispatch({ kind: "image", b64, name: file.name });
    const pred = await api.predict(b64);
    dispatch({ kind: "prediction", topk: pred.topk });
  } catch (err) {
    showError(err);
  }
}

function renderTopk(topk: TopkEntry[] | null): void {
  const list = $("topk");
  list.innerHTML = "";
  if (!topk) {
    return;
  }
  for (const entry of topk) {
    const row = document.createElement("li");
    row.className = "topk-row";
    const bar = document.createElement("span");
    bar.className = "topk-bar";
    bar.style.width = `${Math.round(entry.confidence * 120)}px`;
    const label = document.createElement("span");
    label.textContent = ` ${entry.class}: ${entry.confidence.toFixed(3)}`;
    row.appendChild(bar);
    row.appendChild(label);
    row.title = "explain this class";
    row.addEventListener("click", () => {
      dispatch({ kind: "class", klass: entry.class });
      void runExplain();
    });
    list.appendChild(row);
  }
}

// ----------------------------------------------------------- explain flow

const cardRgb = new WeakMap<HistoryCard, Uint8ClampedArray>();

async function runExplain(): Promise<void> {
  if (!state.imageB64 || state.inflightSeq !== null) {
    return;
  }
  dispatch({ kind: "explain-start" });
  const seq = state.inflightSeq!;
  try {
    const resp = await api.explain({
      image: state.imageB64,
      method: state.method,
      class: state.klass ?? undefined,
      alpha: state.alpha,
    });
    const card: HistoryCard = {
      seq,
      klass: resp.meta.class ?? "(top-1)",
      method: state.method,
      alpha: state.alpha,
      response: resp,
    };
    cardRgb.set(
      card,
      await decodeToRgb(resp.base, resp.raw_grid.width, resp.raw_grid.height),
    );
    dispatch({ kind: "explain-done", seq, card });
  } catch (err) {
    const msg =
      err instanceof ServiceError && err.code === "cam_inapplicable"
        ? `CAM is not applicable to this model: ${err.message}`
        : err instanceof ServiceError
          ? `${err.code}: ${err.message}`
          : String(err);
    dispatch({ kind: "explain-error", seq, message: msg });
  }
}

function paintCard(
  canvas: HTMLCanvasElement,
  card: HistoryCard,
  alpha: number,
): void {
  const rgb = cardRgb.get(card);
  const grid = card.response.raw_grid;
  if (!rgb) {
    return;
  }
  const blended = reblend(
    grid.values,
    card.response.meta.degenerate,
    rgb,
    alpha,
  );
  canvas.width = grid.width;
  canvas.height = grid.height;
  const ctx = canvas.getContext("2d")!;
  ctx.putImageData(
    new ImageData(rgbToRgba(blended), grid.width, grid.height),
    0,
    0,
  );
}

function renderHistory(): void {
  const container = $("history");
  container.innerHTML = "";
  for (let i = state.history.length - 1; i >= 0; i--) {
    const card = state.history[i];
    const isLatest = i === state.history.length - 1;
    const div = document.createElement("div");
    div.className = "card";
    const canvas = document.createElement("canvas");
    canvas.className = "overlay";
    if (isLatest) {
      canvas.id = "latest-overlay";
    }
    paintCard(canvas, card, isLatest ? state.alpha : card.alpha);
    const caption = document.createElement("div");
    caption.className = "caption";
    const shownAlpha = isLatest ? state.alpha : card.alpha;
    caption.textContent =
      `${card.method} / ${card.klass} / alpha ${shownAlpha.toFixed(2)}` +
      (card.response.meta.degenerate ? " (degenerate map)" : "");
    div.appendChild(canvas);
    div.appendChild(caption);
    container.appendChild(div);
  }
}

// -------------------------------------------------------- impressions flow

let impressionBusy = false;

async function runImpression(): Promise<void> {
  if (impressionBusy) {
    return;
  }
  const klass = ($("impress-class") as HTMLSelectElement).value;
  const iterations = Number(
    ($("impress-iters") as HTMLInputElement).value || "300",
  );
  const status = $("impress-status");
  const image = $("impress-image") as HTMLImageElement;
  const spark = $("impress-spark") as HTMLCanvasElement;
  impressionBusy = true;
  status.textContent = "submitting...";
  image.removeAttribute("src");
  try {
    const { job_id } = await api.submitImpression(klass, { iterations });
    const record = await pollJob(api.job, job_id, {
      intervalMs: 400,
      onUpdate: (rec) => {
        status.textContent = `job ${job_id}: ${rec.status}`;
      },
    });
    const result = record.result!;
    status.textContent =
      `done - final confidence ${result.final_confidence.toFixed(4)} ` +
      `(${result.logits.length} iterations)`;
    image.src = pngUrl(result.image);
    drawSparkline(spark, result.logits);
  } catch (err) {
    status.textContent = `impression failed: ${err instanceof Error ? err.message : err}`;
  } finally {
    impressionBusy = false;
  }
}

// ------------------------------------------------------------------ render

function render(): void {
  const uploadName = $("upload-name");
  uploadName.textContent = state.imageName ?? "no image uploaded";
  renderTopk(state.prediction);

  const explainBtn = $("explain-btn") as HTMLButtonElement;
  explainBtn.disabled = !canExplain(state);
  ($("method") as HTMLSelectElement).disabled = state.imageB64 === null;
  ($("class") as HTMLSelectElement).disabled = state.imageB64 === null;

  const alphaLabel = $("alpha-label");
  alphaLabel.textContent = state.alpha.toFixed(2);

  noticeArea().textContent = state.notice ?? "";
  noticeArea().style.display = state.notice ? "block" : "none";

  renderHistory();
}

function fillClassSelect(el: HTMLSelectElement, classes: string[],
                         withAuto: boolean): void {
  el.innerHTML = "";
  if (withAuto) {
    const opt = document.createElement("option");
    opt.value = "";
    opt.textContent = "(top-1)";
    el.appendChild(opt);
  }
  for (const name of classes) {
    const opt = document.createElement("option");
    opt.value = name;
    opt.textContent = name;
    el.appendChild(opt);
  }
}

async function boot(): Promise<void> {
  $("upload").addEventListener("change", (ev) => {
    const input = ev.target as HTMLInputElement;
    if (input.files && input.files[0]) {
      void onUpload(input.files[0]);
    }
  });
  $("explain-btn").addEventListener("click", () => void runExplain());
  ($("method") as HTMLSelectElement).addEventListener("change", (ev) => {
    dispatch({
      kind: "method",
      method: (ev.target as HTMLSelectElement).value,
    });
  });
  ($("class") as HTMLSelectElement).addEventListener("change", (ev) => {
    const v = (ev.target as HTMLSelectElement).value;
    dispatch({ kind: "class", klass: v === "" ? null : v });
  });
  ($("alpha") as HTMLInputElement).addEventListener("input", (ev) => {
    const alpha = Number((ev.target as HTMLInputElement).value);
    dispatch({ kind: "alpha", alpha });
  });
  $("impress-btn").addEventListener("click", () => void runImpression());

  try {
    const card = await api.model();
    dispatch({ kind: "classes", classes: card.class_names });
    fillClassSelect($("class") as HTMLSelectElement, card.class_names, true);
    fillClassSelect(
      $("impress-class") as HTMLSelectElement,
      card.class_names,
      false,
    );
    $("model-card").textContent =
      `${card.name} (${card.arch}, ${card.class_names.length} classes, ` +
      `crc ${card.checkpoint_crc32})`;
  } catch (err) {
    showError(err);
  }
  render();
}

document.addEventListener("DOMContentLoaded", () => void boot());
