import init, { exploreRerank, cluster2d, realign2d } from "./pkg/cvr_demo.js";

const $ = (id) => document.getElementById(id);
const PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

function mulberry32(seed) {
  return () => {
    seed |= 0; seed = (seed + 0x6d2b79f5) | 0;
    let t = Math.imul(seed ^ (seed >>> 15), 1 | seed);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gauss(rand) {
  const u = 1 - rand(), v = rand();
  return Math.sqrt(-2 * Math.log(u)) * Math.cos(2 * Math.PI * v);
}

function fail(el, e) {
  el.innerHTML = `<p class="err">${e.message ?? e}</p>`;
}

// Reranking explorer.
function runRerank(ev) {
  ev?.preventDefault();
  const out = $("rerank-out");
  const cfg = {};
  for (const [k, v] of new FormData($("rerank-form"))) cfg[k] = Number(v);
  try {
    const t0 = performance.now();
    const r = JSON.parse(exploreRerank(JSON.stringify(cfg)));
    const ms = (performance.now() - t0).toFixed(0);
    const c = r.comparison;
    const rows = c.stage1.values.map((v, i) =>
      `<tr><th>${v.metric}</th><td>${(100 * v.value).toFixed(1)}</td><td>${(100 * c.stage2.values[i].value).toFixed(1)}</td></tr>`).join("");
    const ex = r.example;
    const list = (ids) => ids.map((id) => `<li class="${ex.targets.includes(id) ? "hit" : ""}">${id}</li>`).join("");
    out.innerHTML = `
      <table><tr><th></th><th>Stage I</th><th>Stage II</th></tr>${rows}
        <tr><th>avg</th><td>${(100 * c.stage1.average).toFixed(1)}</td><td>${(100 * c.stage2.average).toFixed(1)}</td></tr></table>
      <p>${c.calls_per_query.toFixed(2)} assessor calls/query, early termination ${(100 * c.early_termination_ratio).toFixed(1)}%, ${ms} ms</p>
      <p>Query <code>${ex.query_id}</code> (target <span class="hit">${ex.targets.join(", ")}</span>,
        ${ex.scored.length} scored${ex.early_terminated ? ", stopped early" : ""})</p>
      <div style="display:flex;gap:3em"><div>Stage I<ol>${list(ex.stage1)}</ol></div><div>Stage II<ol>${list(ex.stage2)}</ol></div></div>`;
  } catch (e) {
    fail(out, e);
  }
}

// Clustering canvas; data space is [-1, 1]^2.
let points = [];
let clusterResult = null;
const kc = $("kcanvas");
const toPx = (c, x, y) => [(x + 1) / 2 * c.width, (1 - (y + 1) / 2) * c.height];

function drawClusters() {
  const g = kc.getContext("2d");
  g.clearRect(0, 0, kc.width, kc.height);
  points.forEach(([x, y], i) => {
    const [px, py] = toPx(kc, x, y);
    g.fillStyle = clusterResult ? PALETTE[clusterResult.assignments[i] % PALETTE.length] : "#444";
    g.beginPath(); g.arc(px, py, 3.5, 0, 2 * Math.PI); g.fill();
  });
  if (!clusterResult) return;
  g.strokeStyle = "#000";
  for (const [x, y] of clusterResult.centroids) {
    const [px, py] = toPx(kc, x, y);
    g.beginPath(); g.moveTo(px - 6, py - 6); g.lineTo(px + 6, py + 6); g.moveTo(px + 6, py - 6); g.lineTo(px - 6, py + 6); g.stroke();
  }
}

function runCluster() {
  const out = $("cluster-out");
  try {
    clusterResult = JSON.parse(cluster2d(new Float32Array(points.flat()), +$("k").value, +$("batch").value, BigInt($("kseed").value)));
    const r = clusterResult;
    const batches = r.batches.map((b, i) => `<span style="color:${PALETTE[b.cluster % PALETTE.length]}">#${i}:[${b.samples.join(",")}]</span>`).join(" ");
    out.innerHTML = `<p>${r.iterations} iterations, sizes [${r.sizes.join(", ")}], inertia ${r.inertia_history.map((x) => x.toFixed(3)).join(" &rarr; ")}</p><p>${batches}</p>`;
  } catch (e) {
    clusterResult = null;
    fail(out, e);
  }
  drawClusters();
}

kc.addEventListener("click", (ev) => {
  const b = kc.getBoundingClientRect();
  points.push([(ev.clientX - b.left) / b.width * 2 - 1, 1 - (ev.clientY - b.top) / b.height * 2]);
  clusterResult = null;
  drawClusters();
});
$("clear").onclick = () => { points = []; clusterResult = null; $("cluster-out").innerHTML = ""; drawClusters(); };
$("blobs").onclick = () => {
  const rand = mulberry32(Date.now());
  points = [];
  for (let c = 0; c < 4; c++) {
    const cx = rand() * 1.4 - 0.7, cy = rand() * 1.4 - 0.7;
    for (let i = 0; i < 15; i++) points.push([cx + 0.08 * gauss(rand), cy + 0.08 * gauss(rand)]);
  }
  runCluster();
};
$("cluster").onclick = runCluster;

// Realignment; data space is [-3, 3]^2.
const rc = $("rcanvas");
const rPx = (x, y) => toPx(rc, x / 3, y / 3);

function runRealign() {
  const gap = +$("gap").value, spread = +$("spread").value;
  const rand = mulberry32(7);
  const text = [], image = [];
  for (let i = 0; i < 40; i++) {
    text.push(-0.3 * gap + 0.25 * gauss(rand), 0.25 * gauss(rand));
    image.push(0.7 * gap + spread * gauss(rand), 0.5 * gap + spread * gauss(rand));
  }
  const g = rc.getContext("2d");
  g.clearRect(0, 0, rc.width, rc.height);
  g.strokeStyle = "#ccc";
  const [ox, oy] = rPx(0, 0), [ux] = rPx(1, 0);
  g.beginPath(); g.arc(ox, oy, ux - ox, 0, 2 * Math.PI); g.stroke();
  const dot = (x, y, color) => { const [px, py] = rPx(x, y); g.fillStyle = color; g.beginPath(); g.arc(px, py, 3, 0, 2 * Math.PI); g.fill(); };
  for (let i = 0; i < text.length; i += 2) { dot(text[i], text[i + 1], "#1f77b4"); dot(image[i], image[i + 1], "#ff7f0e"); }
  try {
    const r = JSON.parse(realign2d(new Float32Array(text), new Float32Array(image)));
    r.aligned.forEach(([x, y]) => dot(x, y, "#2ca02c"));
    const s = r.stats;
    $("realign-out").innerHTML = `<p>&mu;<sub>txt</sub> = (${s.mu_txt.map((x) => x.toFixed(2))}), &mu;<sub>img</sub> = (${s.mu_img.map((x) => x.toFixed(2))}), scale ${r.scale.toFixed(3)}</p>`;
  } catch (e) {
    fail($("realign-out"), e);
  }
}
$("gap").oninput = runRealign;
$("spread").oninput = runRealign;

await init();
$("status").textContent = "ready";
$("rerank-form").addEventListener("submit", runRerank);
runRerank();
$("blobs").onclick();
runRealign();
