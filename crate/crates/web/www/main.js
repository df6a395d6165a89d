import init, { Demo, defaultThreshold } from "./pkg/mitodet_web.js";

const $ = (id) => document.getElementById(id);
const canvas = $("view");
const ctx = canvas.getContext("2d");
const MATCH_RADIUS = 30;
const MARKER_RADIUS = 17;

let demo = null;
let detections = [];

function status(text) {
  $("status").textContent = text;
}

function guarded(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      status(`error: ${e.message ?? e}`);
    }
  };
}

function draw() {
  if (!demo) return;
  const w = demo.width(), h = demo.height();
  canvas.width = w;
  canvas.height = h;
  ctx.putImageData(new ImageData(new Uint8ClampedArray(demo.rgba()), w, h), 0, 0);

  if ($("show-tiles").checked) {
    const q = demo.tilePlan(512, 75);
    ctx.lineWidth = 2;
    for (let i = 0; i < q.length; i += 4) {
      ctx.strokeStyle = `hsla(${(i * 37) % 360}, 80%, 40%, 0.8)`;
      ctx.strokeRect(q[i] + 1, q[i + 1] + 1, q[i + 2] - 2, q[i + 3] - 2);
    }
  }

  const truth = demo.truth();
  ctx.strokeStyle = "#06f";
  ctx.lineWidth = 2;
  for (let i = 0; i < truth.length; i += 2) {
    const [x, y] = [truth[i], truth[i + 1]];
    ctx.beginPath();
    ctx.moveTo(x - 6, y); ctx.lineTo(x + 6, y);
    ctx.moveTo(x, y - 6); ctx.lineTo(x, y + 6);
    ctx.stroke();
  }

  for (const d of detections) {
    const near = [];
    for (let i = 0; i < truth.length; i += 2) near.push(Math.hypot(truth[i] - d.x, truth[i + 1] - d.y));
    ctx.strokeStyle = near.some((r) => r <= MATCH_RADIUS) ? "#0a0" : "#d00";
    ctx.beginPath();
    ctx.arc(d.x, d.y, MARKER_RADIUS, 0, 2 * Math.PI);
    ctx.stroke();
  }
}

const generate = guarded(() => {
  const size = Number($("size").value);
  demo?.free();
  demo = new Demo(size, size, Number($("figures").value), Number($("seed").value));
  detections = [];
  perturb();
});

const perturb = guarded(() => {
  if (!demo) return;
  const sigma = Number($("sigma").value);
  $("sigma-out").textContent = sigma.toFixed(2);
  demo.perturbStain(sigma, Number($("stain-seed").value));
  detections = [];
  status(`${demo.width()}×${demo.height()} slide, stain sigma ${sigma.toFixed(2)}`);
  draw();
});

const detect = guarded(() => {
  if (!demo) return;
  const t0 = performance.now();
  const report = demo.detect(Number($("threshold").value), $("normalize").checked);
  const ms = performance.now() - t0;
  const p = report.points();
  detections = [];
  for (let i = 0; i < p.length; i += 3) detections.push({ x: p[i], y: p[i + 1], score: p[i + 2] });
  status(
    `${detections.length} detections in ${ms.toFixed(0)} ms — ` +
    `tp ${report.tp()}  fp ${report.fp()}  fn ${report.falseNegatives()}  F1 ${report.f1().toFixed(3)}`
  );
  report.free();
  draw();
});

await init();
$("threshold").value = defaultThreshold().toFixed(2);
$("generate").addEventListener("click", generate);
$("sigma").addEventListener("input", perturb);
$("stain-seed").addEventListener("change", perturb);
$("show-tiles").addEventListener("change", draw);
$("detect").addEventListener("click", detect);
generate();
