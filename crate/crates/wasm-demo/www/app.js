import init, { SwissRollDemo, laplace_samples, generator_orbit } from "./pkg/vlgo_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const N_POINTS = 1500;
const PATH_STARTS = [100, 500, 900, 1300];

let demo = null;
let yaw = 0.6, pitch = 0.35;

// Swiss roll -------------------------------------------------------------

function project(x, y, z) {
  // Center the roll roughly on the origin before rotating.
  y -= 10.5;
  const cx = Math.cos(yaw) * x + Math.sin(yaw) * z;
  const cz = -Math.sin(yaw) * x + Math.cos(yaw) * z;
  const cy = Math.cos(pitch) * y - Math.sin(pitch) * cz;
  const s = 13;
  return [260 + s * cx, 210 - s * cy];
}

function drawRoll() {
  const ctx = $("roll").getContext("2d");
  ctx.clearRect(0, 0, 520, 420);
  if (!demo) return;
  const pts = demo.points();
  ctx.fillStyle = "#7a9cc6";
  for (let i = 0; i < pts.length; i += 3) {
    const [u, v] = project(pts[i], pts[i + 1], pts[i + 2]);
    ctx.fillRect(u - 1, v - 1, 2, 2);
  }
  const op = Number($("op").value || 0);
  ctx.strokeStyle = "#c0392b";
  ctx.lineWidth = 2;
  for (const s of PATH_STARTS) {
    let path;
    try { path = demo.path(op, s, 3, 0.1); } catch (e) { continue; }
    ctx.beginPath();
    for (let i = 0; i < path.length; i += 3) {
      const [u, v] = project(path[i], path[i + 1], path[i + 2]);
      if (i === 0) ctx.moveTo(u, v); else ctx.lineTo(u, v);
    }
    ctx.stroke();
    const mid = (path.length / 3 - 1) / 2 * 3;
    const [u, v] = project(path[mid], path[mid + 1], path[mid + 2]);
    ctx.fillStyle = "#000";
    ctx.fillRect(u - 3, v - 3, 6, 6);
  }
}

function drawNorms() {
  const ctx = $("norms").getContext("2d");
  ctx.clearRect(0, 0, 300, 160);
  if (!demo) return;
  const norms = demo.operator_norms();
  const max = Math.max(...norms, 1e-12);
  const w = 300 / norms.length;
  norms.forEach((n, m) => {
    const h = 130 * n / max;
    ctx.fillStyle = n > 0.1 * max ? "#2c3e50" : "#bbb";
    ctx.fillRect(m * w + 4, 140 - h, w - 8, h);
    ctx.fillStyle = "#000";
    ctx.fillText(`${m}`, m * w + w / 2 - 3, 155);
  });
}

function reset() {
  try {
    demo = new SwissRollDemo(BigInt(num("seed")), N_POINTS, $("method").value, num("samples"), $("thresholded").checked);
  } catch (e) {
    $("status").textContent = `error: ${e}`;
    return;
  }
  const sel = $("op");
  sel.innerHTML = "";
  demo.operator_norms().forEach((_, m) => sel.add(new Option(`${m}`, `${m}`)));
  $("status").textContent = "epoch 0";
  drawRoll();
  drawNorms();
}

function train() {
  if (!demo) return;
  const t0 = performance.now();
  try {
    const [epoch, mse, l1] = demo.train(20);
    const ms = performance.now() - t0;
    $("status").textContent = `epoch ${epoch}\nmse   ${mse.toFixed(5)}\nl1    ${l1.toFixed(4)}\n${ms.toFixed(0)} ms for 20 batches`;
  } catch (e) {
    $("status").textContent = `error: ${e}`;
  }
  drawRoll();
  drawNorms();
}

function dragToRotate(canvas) {
  let last = null;
  canvas.addEventListener("mousedown", (e) => { last = [e.offsetX, e.offsetY]; });
  window.addEventListener("mouseup", () => { last = null; });
  canvas.addEventListener("mousemove", (e) => {
    if (!last) return;
    yaw += (e.offsetX - last[0]) * 0.01;
    pitch += (e.offsetY - last[1]) * 0.01;
    last = [e.offsetX, e.offsetY];
    drawRoll();
  });
}

// Laplacian samples ------------------------------------------------------

function drawHistogram() {
  let s;
  try {
    s = laplace_samples(num("shift"), num("scale"), num("zeta"), $("thr2").checked, 20000, BigInt(Date.now() % 100000));
  } catch (e) {
    $("zeros").textContent = `error: ${e}`;
    return;
  }
  const range = 6 * num("scale") + Math.abs(num("shift"));
  const bins = 81;
  const counts = new Array(bins).fill(0);
  let zeros = 0;
  for (const v of s) {
    if (v === 0) zeros++;
    const b = Math.floor((v + range) / (2 * range) * bins);
    if (b >= 0 && b < bins) counts[b]++;
  }
  const ctx = $("hist").getContext("2d");
  ctx.clearRect(0, 0, 520, 220);
  const max = Math.max(...counts);
  const w = 520 / bins;
  counts.forEach((c, b) => {
    const h = 190 * c / max;
    ctx.fillStyle = b === Math.floor(bins / 2) ? "#c0392b" : "#7a9cc6";
    ctx.fillRect(b * w, 200 - h, w - 1, h);
  });
  ctx.fillStyle = "#000";
  ctx.fillText(`${(-range).toFixed(3)}`, 2, 214);
  ctx.fillText(`${range.toFixed(3)}`, 480, 214);
  $("zeros").textContent = `${(100 * zeros / s.length).toFixed(1)}% exact zeros`;
}

// Generator orbit --------------------------------------------------------

let start = [1.5, 0];

function drawOrbit() {
  const ctx = $("orbit").getContext("2d");
  ctx.clearRect(0, 0, 420, 420);
  ctx.strokeStyle = "#ddd";
  ctx.beginPath();
  ctx.moveTo(0, 210); ctx.lineTo(420, 210);
  ctx.moveTo(210, 0); ctx.lineTo(210, 420);
  ctx.stroke();
  const s = 50;
  let p;
  try {
    p = generator_orbit(num("ga"), num("gb"), num("gc"), num("gd"), start[0], start[1], num("gn"), 0.05);
  } catch (e) {
    ctx.fillText(`error: ${e}`, 10, 20);
    return;
  }
  ctx.strokeStyle = "#c0392b";
  ctx.lineWidth = 2;
  ctx.beginPath();
  for (let i = 0; i < p.length; i += 2) {
    const u = 210 + s * p[i], v = 210 - s * p[i + 1];
    if (i === 0) ctx.moveTo(u, v); else ctx.lineTo(u, v);
  }
  ctx.stroke();
  ctx.fillStyle = "#000";
  ctx.fillRect(210 + s * start[0] - 3, 210 - s * start[1] - 3, 6, 6);
}

await init();
$("reset").onclick = reset;
$("train").onclick = train;
$("op").onchange = drawRoll;
dragToRotate($("roll"));
$("sample").onclick = drawHistogram;
for (const id of ["ga", "gb", "gc", "gd", "gn"]) $(id).oninput = drawOrbit;
$("orbit").addEventListener("click", (e) => {
  start = [(e.offsetX - 210) / 50, (210 - e.offsetY) / 50];
  drawOrbit();
});
reset();
drawHistogram();
drawOrbit();
