// Page wiring: upload control, threshold slider, overlay canvas, region panel.

import { ApiClient } from "./api";
import { Session } from "./session";
import { drawOverlay, regionAtPoint, renderImageSummary, renderRegionPanel } from "./render";

const api = new ApiClient(import.meta.env.VITE_API_BASE ?? "");
const session = new Session(api);

const fileInput = document.getElementById("file-input") as HTMLInputElement;
const slider = document.getElementById("threshold") as HTMLInputElement;
const sliderValue = document.getElementById("threshold-value") as HTMLSpanElement;
const canvas = document.getElementById("overlay") as HTMLCanvasElement;
const banner = document.getElementById("error-banner") as HTMLDivElement;
const summary = document.getElementById("summary") as HTMLDivElement;
const panel = document.getElementById("region-panel") as HTMLDivElement;
const status = document.getElementById("status") as HTMLSpanElement;

let currentImage: HTMLImageElement | null = null;

session.subscribe((snapshot) => {
  banner.hidden = snapshot.error === null;
  banner.textContent = snapshot.error ?? "";
  status.textContent = snapshot.busy ? "analyzing..." : "";
  drawOverlay(canvas, currentImage, snapshot);
  renderImageSummary(summary, snapshot);
  const region =
    snapshot.response && snapshot.selectedRegion !== null
      ? snapshot.response.regions[snapshot.selectedRegion]
      : null;
  renderRegionPanel(panel, region, snapshot.threshold);
});

fileInput.addEventListener("change", async () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  const image = new Image();
  image.src = URL.createObjectURL(file);
  await image.decode();
  currentImage = image;
  await session.uploadAndPredict(file, file.name);
});

slider.addEventListener("input", () => {
  const value = Number(slider.value) / 100;
  sliderValue.textContent = value.toFixed(2);
  session.setThreshold(value); // pure client-side recomputation
});

canvas.addEventListener("click", (event) => {
  const snapshot = session.snapshot();
  if (!snapshot.response) return;
  const rect = canvas.getBoundingClientRect();
  const x = ((event.clientX - rect.left) / rect.width) * canvas.width;
  const y = ((event.clientY - rect.top) / rect.height) * canvas.height;
  const hit = regionAtPoint(snapshot.response.regions, x, y);
  if (hit !== null) {
    session.selectRegion(hit);
  }
});
