/** DOM wiring: canvas stack, toolbar, slice slider and badge strip. */

import { SessionApi } from "./api.js";
import type { Polarity } from "./api.js";
import { AnnotatorApp } from "./app.js";
import type { Renderer } from "./app.js";
import type { Badge, Marker } from "./state.js";
import { NEGATIVE_COLOR, POSITIVE_COLOR, grayToRgba,
         maskToOverlay } from "./overlay.js";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

const api = new SessionApi(
  (window as unknown as { ISEG_API?: string }).ISEG_API ?? "http://127.0.0.1:8000");

let slices: Uint8Array[] = [];   // uploaded pixels, kept client-side
let imgW = 0;
let imgH = 0;

class DomRenderer implements Renderer {
  private base = $("base") as unknown as HTMLCanvasElement;
  private overlay = $("overlay") as unknown as HTMLCanvasElement;
  private markers = $("markers") as unknown as HTMLCanvasElement;

  private sized = false;

  private fit(): void {
    if (this.sized || imgW === 0) return;
    for (const c of [this.base, this.overlay, this.markers]) {
      c.width = imgW;
      c.height = imgH;
    }
    this.sized = true;
  }

  paintBase(slice: number): void {
    this.fit();
    const ctx = this.base.getContext("2d");
    if (!ctx || !slices[slice]) return;
    const rgba = grayToRgba(slices[slice]);
    ctx.putImageData(new ImageData(
      rgba as Uint8ClampedArray<ArrayBuffer>, imgW, imgH), 0, 0);
    $("slice-label").textContent = `slice ${slice}`;
  }

  paintOverlay(slice: number, maskPng: Uint8Array, version: number,
               opacity: number): void {
    if (slice !== app.state.activeSlice) return;
    const blob = new Blob([maskPng as BlobPart], { type: "image/png" });
    void createImageBitmap(blob).then((bitmap) => {
      const scratch = document.createElement("canvas");
      scratch.width = bitmap.width;
      scratch.height = bitmap.height;
      const sctx = scratch.getContext("2d");
      if (!sctx) return;
      sctx.drawImage(bitmap, 0, 0);
      const mask = sctx.getImageData(0, 0, bitmap.width, bitmap.height);
      const tinted = maskToOverlay(mask.data, opacity);
      const ctx = this.overlay.getContext("2d");
      if (!ctx) return;
      ctx.clearRect(0, 0, this.overlay.width, this.overlay.height);
      ctx.putImageData(new ImageData(
        tinted as Uint8ClampedArray<ArrayBuffer>,
        bitmap.width, bitmap.height), 0, 0);
      $("version-label").textContent = `mask v${version}`;
    });
  }

  paintMarkers(slice: number, markers: Marker[]): void {
    if (slice !== app.state.activeSlice) return;
    const ctx = this.markers.getContext("2d");
    if (!ctx) return;
    ctx.clearRect(0, 0, this.markers.width, this.markers.height);
    for (const m of markers) {
      ctx.beginPath();
      ctx.arc(m.col + 0.5, m.row + 0.5, 2.2, 0, 2 * Math.PI);
      ctx.fillStyle = m.polarity === "positive" ? POSITIVE_COLOR
                                                : NEGATIVE_COLOR;
      ctx.globalAlpha = m.pending ? 0.5 : 1.0;
      ctx.fill();
      ctx.globalAlpha = 1.0;
    }
  }

  renderBadges(items: Badge[]): void {
    const strip = $("badges");
    strip.innerHTML = "";
    for (const b of items) {
      const el = document.createElement("span");
      el.className = "badge" + (b.slice === app.state.activeSlice
                                ? " active" : "");
      el.dataset.slice = String(b.slice);
      el.dataset.seed = String(b.seed);
      el.textContent = `${b.slice}←${b.seed}`;
      strip.appendChild(el);
    }
  }

  setBusy(busy: boolean): void {
    $("spinner").style.visibility = busy ? "visible" : "hidden";
  }

  setUndoEnabled(enabled: boolean): void {
    ($("undo") as unknown as HTMLButtonElement).disabled = !enabled;
  }

  showError(message: string, retry?: () => void): void {
    const toast = $("toast");
    toast.textContent = message;
    toast.classList.add("visible");
    if (retry) {
      const btn = document.createElement("button");
      btn.textContent = "retry";
      btn.onclick = () => {
        toast.classList.remove("visible");
        retry();
      };
      toast.appendChild(btn);
    }
    setTimeout(() => toast.classList.remove("visible"), 4000);
  }
}

const renderer = new DomRenderer();
const app = new AnnotatorApp(api, renderer);

function canvasPoint(ev: MouseEvent): { x: number; y: number; w: number;
                                        h: number } {
  const canvas = $("markers") as unknown as HTMLCanvasElement;
  const rect = canvas.getBoundingClientRect();
  return {
    x: ((ev.clientX - rect.left) / rect.width) * canvas.width,
    y: ((ev.clientY - rect.top) / rect.height) * canvas.height,
    w: canvas.width,
    h: canvas.height,
  };
}

function wire(): void {
  const markers = $("markers") as unknown as HTMLCanvasElement;
  markers.addEventListener("click", (ev) => {
    const p = canvasPoint(ev);
    void app.clickCanvas(p.x, p.y, p.w, p.h);
  });
  markers.addEventListener("contextmenu", (ev) => {
    ev.preventDefault();
    const p = canvasPoint(ev);
    void app.clickCanvas(p.x, p.y, p.w, p.h, "negative");
  });

  $("undo").addEventListener("click", () => void app.undo());
  $("propagate").addEventListener("click", () => void app.propagate());

  const slider = $("slice") as unknown as HTMLInputElement;
  slider.addEventListener("input", () => void app.setSlice(Number(slider.value)));

  const opacity = $("opacity") as unknown as HTMLInputElement;
  opacity.addEventListener("input", () =>
    app.setOpacity(Number(opacity.value) / 100));

  for (const mode of ["positive", "negative"] as Polarity[]) {
    $(`mode-${mode}`).addEventListener("click", () => {
      app.setMode(mode);
      $("mode-positive").classList.toggle("selected", mode === "positive");
      $("mode-negative").classList.toggle("selected", mode === "negative");
    });
  }

  ($("png-input") as unknown as HTMLInputElement)
    .addEventListener("change", (ev) => void openPng(ev));
  ($("raw-input") as unknown as HTMLInputElement)
    .addEventListener("change", (ev) => void openRaw(ev));
}

async function openPng(ev: Event): Promise<void> {
  const input = ev.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  const bytes = new Uint8Array(await file.arrayBuffer());
  const bitmap = await createImageBitmap(new Blob([bytes as BlobPart]));
  imgW = bitmap.width;
  imgH = bitmap.height;
  const scratch = document.createElement("canvas");
  scratch.width = imgW;
  scratch.height = imgH;
  const ctx = scratch.getContext("2d");
  if (!ctx) return;
  ctx.drawImage(bitmap, 0, 0);
  const rgba = ctx.getImageData(0, 0, imgW, imgH).data;
  const gray = new Uint8Array(imgW * imgH);
  for (let i = 0; i < gray.length; i++) gray[i] = rgba[4 * i];
  slices = [gray];
  configureSlider(1);
  await app.openImage(btoa(String.fromCharCode(...bytes)), imgH, imgW);
}

async function openRaw(ev: Event): Promise<void> {
  const input = ev.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  const depth = Number(($("raw-depth") as unknown as HTMLInputElement).value);
  const height = Number(($("raw-height") as unknown as HTMLInputElement).value);
  const width = Number(($("raw-width") as unknown as HTMLInputElement).value);
  const bytes = new Uint8Array(await file.arrayBuffer());
  if (bytes.length !== depth * height * width) {
    renderer.showError(`raw size ${bytes.length} != ${depth}x${height}x${width}`);
    return;
  }
  imgW = width;
  imgH = height;
  slices = [];
  for (let d = 0; d < depth; d++) {
    slices.push(bytes.slice(d * height * width, (d + 1) * height * width));
  }
  configureSlider(depth);
  let b64 = "";
  for (let i = 0; i < bytes.length; i += 0x8000) {
    b64 += String.fromCharCode(...bytes.subarray(i, i + 0x8000));
  }
  await app.openRawVolume(btoa(b64), depth, height, width);
}

function configureSlider(depth: number): void {
  const slider = $("slice") as unknown as HTMLInputElement;
  slider.max = String(depth - 1);
  slider.value = "0";
  slider.disabled = depth <= 1;
  ($("propagate") as unknown as HTMLButtonElement).disabled = depth <= 1;
}

wire();
