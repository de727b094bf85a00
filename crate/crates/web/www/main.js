// Built with `wasm-pack build --target web --out-dir www/pkg` from crates/web.
import init, { Scene, mix_pair, energy_curve, side } from "./pkg/afan_web.js";

const COLORS = ["#e33", "#3a3", "#36e"];
const $ = (id) => document.getElementById(id);

function paint(canvas, rgba, boxes) {
  const n = side();
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(rgba), n, n), 0, 0);
  if (!boxes) return;
  ctx.lineWidth = 1;
  for (let i = 0; i < boxes.length; i += 5) {
    ctx.strokeStyle = COLORS[boxes[i + 4] % COLORS.length];
    ctx.strokeRect(boxes[i] + 0.5, boxes[i + 1] + 0.5, boxes[i + 2] - boxes[i], boxes[i + 3] - boxes[i + 1]);
  }
}

function sceneParams() {
  return [Number($("scene-seed").value), Number($("scene-index").value), Number($("scene-severity").value)];
}

function drawScenes() {
  const [seed, index, severity] = sceneParams();
  const night = $("scene-night").checked;
  const s = new Scene(seed, index, false, severity, night);
  const t = new Scene(seed, index, true, severity, night);
  paint($("scene-source"), s.rgba(), s.boxes());
  paint($("scene-target"), t.rgba(), t.boxes());
  s.free();
  t.free();
  drawMix();
}

function drawMix() {
  const [seed, index, severity] = sceneParams();
  const lambda = Number($("mix-lambda").value);
  $("mix-value").textContent = lambda.toFixed(2);
  const both = mix_pair(seed, index, severity, lambda);
  const half = both.length / 2;
  paint($("mix-source"), both.slice(0, half));
  paint($("mix-target"), both.slice(half));
}

function drawEnergy() {
  const canvas = $("energy-plot");
  const ctx = canvas.getContext("2d");
  const tri = energy_curve(Number($("scene-seed").value), 20, Number($("energy-n").value));
  const [w, h, pad] = [canvas.width, canvas.height, 30];
  const x = (lm) => pad + (lm / 0.5) * (w - 2 * pad);
  const y = (r) => h - pad - r * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#333";
  ctx.fillText("0", pad - 4, h - pad + 14);
  ctx.fillText("0.5", w - pad - 8, h - pad + 14);
  ctx.fillText("1", pad - 14, pad + 4);
  ctx.beginPath();
  ctx.strokeStyle = "#36e";
  for (let lm = 0; lm <= 0.5001; lm += 0.01) {
    const px = x(lm), py = y((1 - lm) ** 2);
    lm === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
  }
  ctx.stroke();
  ctx.fillStyle = "#e33";
  for (let i = 0; i < tri.length; i += 3) {
    ctx.beginPath();
    ctx.arc(x(tri[i]), y(tri[i + 2]), 3, 0, 2 * Math.PI);
    ctx.fill();
  }
}

await init();
for (const id of ["scene-seed", "scene-index", "scene-severity", "scene-night"]) {
  $(id).addEventListener("input", drawScenes);
}
$("mix-lambda").addEventListener("input", drawMix);
$("energy-run").addEventListener("click", drawEnergy);
drawScenes();
drawEnergy();
