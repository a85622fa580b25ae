// Canvas rendering: grayscale slice, contour overlays, EVR bars and the
// probe box plot. No volume math happens here; the canvas shows exactly
// what the API returned.

import type { Contour, ProbeSummary } from "./api.js";
import type { GrayImage } from "./pgm.js";

export const ROLE_COLORS: Record<string, string> = {
  original: "#e4484b", // red
  deformed: "#e3a812", // gold
};

const SCALE = 12;

export function drawSlice(
  canvas: HTMLCanvasElement,
  image: GrayImage,
  contours: Contour[],
): void {
  canvas.width = image.width * SCALE;
  canvas.height = image.height * SCALE;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;

  const base = document.createElement("canvas");
  base.width = image.width;
  base.height = image.height;
  const bctx = base.getContext("2d")!;
  const imageData = bctx.createImageData(image.width, image.height);
  for (let i = 0; i < image.pixels.length; i++) {
    const v = image.pixels[i];
    imageData.data[4 * i] = v;
    imageData.data[4 * i + 1] = v;
    imageData.data[4 * i + 2] = v;
    imageData.data[4 * i + 3] = 255;
  }
  bctx.putImageData(imageData, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(base, 0, 0, canvas.width, canvas.height);

  for (const contour of contours) {
    ctx.strokeStyle = ROLE_COLORS[contour.role] ?? "#ffffff";
    ctx.lineWidth = 2;
    ctx.beginPath();
    contour.points.forEach(([r, c], i) => {
      // contour points are (row, col); canvas x is col, y is row
      const x = (c + 0.5) * SCALE;
      const y = (r + 0.5) * SCALE;
      if (i === 0) ctx.moveTo(x, y);
      else ctx.lineTo(x, y);
    });
    ctx.stroke();
  }
}

export function drawEvrChart(canvas: HTMLCanvasElement, evr: number[]): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  const barW = w / evr.length;
  const max = Math.max(...evr, 1e-9);
  evr.forEach((v, i) => {
    const barH = (v / max) * (h - 18);
    ctx.fillStyle = "#4a7dbd";
    ctx.fillRect(i * barW + 1, h - barH - 14, barW - 2, barH);
  });
  ctx.fillStyle = "#9aa4b0";
  ctx.font = "10px sans-serif";
  ctx.fillText("1", 2, h - 2);
  ctx.fillText(String(evr.length), w - 16, h - 2);
}

export function drawProbeBoxes(canvas: HTMLCanvasElement, probe: ProbeSummary): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.clearRect(0, 0, w, h);
  const comps = probe.components;
  const max = Math.max(...comps.map((c) => c.q3), 1e-9);
  const barW = w / comps.length;
  comps.forEach((c, i) => {
    const x = i * barW;
    const yQ1 = h - 14 - (c.q1 / max) * (h - 20);
    const yQ3 = h - 14 - (c.q3 / max) * (h - 20);
    const yMed = h - 14 - (c.median / max) * (h - 20);
    ctx.fillStyle = "#6c5b9e66";
    ctx.fillRect(x + 2, yQ3, barW - 4, Math.max(1, yQ1 - yQ3));
    ctx.strokeStyle = "#c0b3ef";
    ctx.beginPath();
    ctx.moveTo(x + 2, yMed);
    ctx.lineTo(x + barW - 2, yMed);
    ctx.stroke();
  });
  ctx.fillStyle = "#9aa4b0";
  ctx.font = "10px sans-serif";
  ctx.fillText(probe.transform, 4, 10);
}
