import init, { exploreScene, sinkhornHeatmap, aucCurve } from "./pkg/oblimatch_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function guard(statsId, fn) {
  try {
    fn();
  } catch (e) {
    $(statsId).innerHTML = `<span class="err">${e}</span>`;
  }
}

function drawScene() {
  const r = JSON.parse(exploreScene(num("s-points"), num("s-excl"), num("s-noise"), num("s-pix"),
    num("s-rot"), num("s-thr"), num("s-seed")));
  const c = $("s-canvas");
  const gap = 20;
  c.width = 2 * r.width + gap;
  c.height = r.height;
  const g = c.getContext("2d");
  g.fillStyle = "#f4f4f4";
  g.fillRect(0, 0, r.width, r.height);
  g.fillRect(r.width + gap, 0, r.width, r.height);
  g.fillStyle = "#333";
  for (const [x, y] of r.keypoints_a) g.fillRect(x - 1, y - 1, 2, 2);
  for (const [x, y] of r.keypoints_b) g.fillRect(x + r.width + gap - 1, y - 1, 2, 2);
  for (const m of r.matches) {
    const [xa, ya] = r.keypoints_a[m.a];
    const [xb, yb] = r.keypoints_b[m.b];
    g.strokeStyle = m.correct ? "#2ca02c" : "#d62728";
    g.beginPath();
    g.moveTo(xa, ya);
    g.lineTo(xb + r.width + gap, yb);
    g.stroke();
  }
  const pose = r.pose_error_deg === null ? `failed (${r.failure})` : `${r.pose_error_deg.toFixed(3)} deg`;
  $("s-stats").textContent =
    `matches ${r.matches.length} / ${r.num_ground_truth} true pairs\n` +
    `precision ${(100 * r.precision).toFixed(1)}%  matching score ${(100 * r.matching_score).toFixed(1)}%\n` +
    `RANSAC inliers ${r.num_inliers}  pose error ${pose}`;
}

function drawSinkhorn() {
  const r = JSON.parse(sinkhornHeatmap(num("k-m"), num("k-n"), num("k-sig"), num("k-bin"),
    num("k-it"), num("k-seed")));
  const c = $("k-canvas");
  const g = c.getContext("2d");
  const cell = Math.min(c.width / (r.cols + 1), c.height / (r.rows + 1));
  g.clearRect(0, 0, c.width, c.height);
  r.coupling.forEach((row, i) => row.forEach((v, j) => {
    const shade = Math.round(255 * (1 - Math.min(v, 1)));
    const bin = i === r.rows || j === r.cols;
    g.fillStyle = bin ? `rgb(255,${shade},${shade})` : `rgb(${shade},${shade},255)`;
    g.fillRect(j * cell, i * cell, cell - 1, cell - 1);
  }));
  $("k-stats").textContent =
    `${r.rows} x ${r.cols} plus dustbins (red)\nmax marginal error ${r.marginal_error.toExponential(2)}`;
}

function drawAuc() {
  const max = num("a-max");
  const r = JSON.parse(aucCurve($("a-errors").value, max, 400));
  const c = $("a-canvas");
  const g = c.getContext("2d");
  const pad = 30;
  const w = c.width - 2 * pad;
  const h = c.height - 2 * pad;
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#888";
  g.strokeRect(pad, pad, w, h);
  g.fillStyle = "#333";
  g.fillText("0", pad - 10, c.height - pad + 12);
  g.fillText(`${max} deg`, c.width - pad - 20, c.height - pad + 12);
  g.fillText("1", pad - 12, pad + 4);
  g.strokeStyle = "#1f77b4";
  g.beginPath();
  r.curve.forEach(([t, rec], k) => {
    const x = pad + (t / max) * w;
    const y = pad + (1 - rec) * h;
    if (k === 0) g.moveTo(x, y); else g.lineTo(x, y);
  });
  g.stroke();
  $("a-stats").textContent =
    `AUC@5 ${r.auc["5"].toFixed(2)}  AUC@10 ${r.auc["10"].toFixed(2)}  AUC@20 ${r.auc["20"].toFixed(2)}`;
}

await init();
$("s-run").onclick = () => guard("s-stats", drawScene);
$("k-run").onclick = () => guard("k-stats", drawSinkhorn);
$("a-run").onclick = () => guard("a-stats", drawAuc);
guard("s-stats", drawScene);
guard("k-stats", drawSinkhorn);
guard("a-stats", drawAuc);
