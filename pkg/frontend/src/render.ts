// Canvas overlay and probability panel rendering.

import { deriveRegionLabels } from "./aggregate";
import type { SessionSnapshot } from "./session";
import type { RegionPayload } from "./types";

const BOX_COLOR = "#4fc3f7";
const BOX_SELECTED = "#ffb300";

export function drawOverlay(
  canvas: HTMLCanvasElement,
  image: HTMLImageElement | null,
  snapshot: SessionSnapshot,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!image || !snapshot.response) return;

  canvas.width = image.naturalWidth;
  canvas.height = image.naturalHeight;
  ctx.drawImage(image, 0, 0);

  snapshot.response.regions.forEach((region, index) => {
    const { x, y, w, h } = region.box;
    ctx.lineWidth = Math.max(1, canvas.width / 200);
    ctx.strokeStyle = index === snapshot.selectedRegion ? BOX_SELECTED : BOX_COLOR;
    ctx.strokeRect(x, y, w, h);
  });
}

function probabilityRow(name: string, value: number): string {
  const pct = (value * 100).toFixed(1);
  return `<div class="prob-row"><span>${name}</span>
    <span class="bar"><span class="fill" style="width:${pct}%"></span></span>
    <span class="pct">${pct}%</span></div>`;
}

function topEntries(record: Record<string, number>, k: number): [string, number][] {
  return Object.entries(record)
    .sort((a, b) => b[1] - a[1])
    .slice(0, k);
}

export function renderRegionPanel(
  container: HTMLElement,
  region: RegionPayload | null,
  threshold: number,
): void {
  if (!region) {
    container.innerHTML = "<p class=\"hint\">Click a bounding box to inspect a region.</p>";
    return;
  }
  const labels = deriveRegionLabels(region, threshold);
  const p = region.probabilities;
  const location = topEntries(p.location, 3)
    .map(([name, value]) => probabilityRow(name.replaceAll("_", " "), value))
    .join("");
  const subtype = Object.entries(p.tumor_subtype)
    .map(([name, value]) => probabilityRow(name, value))
    .join("");
  const fracture = Object.entries(p.fracture)
    .map(([name, value]) => probabilityRow(name.replaceAll("_", " "), value))
    .join("");
  container.innerHTML = `
    <h3>Region (${region.box.x}, ${region.box.y}) ${region.box.w}x${region.box.h}</h3>
    <p>call: ${labels.tumor ? `tumor (${labels.subtype})` : "no tumor"}</p>
    <h4>abnormality</h4>${probabilityRow("abnormal", p.abnormality)}
    <h4>tumor subtype</h4>${subtype}
    <h4>location (top 3)</h4>${location}
    <h4>fracture</h4>${fracture}
    <h4>implant</h4>${probabilityRow("implant", p.implant)}
  `;
}

export function renderImageSummary(container: HTMLElement, snapshot: SessionSnapshot): void {
  if (!snapshot.labels) {
    container.innerHTML = "";
    return;
  }
  const l = snapshot.labels;
  const badge = (on: boolean, text: string) =>
    `<span class="badge ${on ? "pos" : "neg"}">${text}: ${on ? "yes" : "no"}</span>`;
  container.innerHTML = `
    ${badge(l.tumor_positive, "tumor")}
    <span class="badge ${l.malignancy === "malignant" ? "pos" : "neg"}">malignancy: ${l.malignancy}</span>
    ${badge(l.fracture_positive, "fracture")}
    ${badge(l.implant_positive, "implant")}
    ${badge(l.abnormality_positive, "abnormal")}
    <span class="badge">max P(malignant): ${(l.max_probability_malignant * 100).toFixed(1)}%</span>
  `;
}

export function regionAtPoint(
  regions: RegionPayload[],
  x: number,
  y: number,
): number | null {
  // smallest region containing the point wins (most specific)
  let best: number | null = null;
  let bestArea = Infinity;
  regions.forEach((region, index) => {
    const { box } = region;
    if (x >= box.x && x <= box.x + box.w && y >= box.y && y <= box.y + box.h) {
      const area = box.w * box.h;
      if (area < bestArea) {
        best = index;
        bestArea = area;
      }
    }
  });
  return best;
}
