import init, { intervals, clip, train } from "./pkg/omnirl_web.js";

const $ = (id) => document.getElementById(id);

function show(el, value, isError) {
  el.textContent = value;
  el.className = isError ? "err" : "";
}

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ccc";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
}

function line(ctx, xs, ys, box, color) {
  const [x0, x1, y0, y1] = box;
  const { width: w, height: h } = ctx.canvas;
  ctx.strokeStyle = color;
  ctx.beginPath();
  xs.forEach((x, i) => {
    const px = ((x - x0) / (x1 - x0)) * w;
    const py = h - ((ys[i] - y0) / (y1 - y0 || 1)) * h;
    i ? ctx.lineTo(px, py) : ctx.moveTo(px, py);
  });
  ctx.stroke();
}

function runIntervals() {
  const out = $("iv-out");
  try {
    const chosen = JSON.parse($("iv-chosen").value);
    const evidence = JSON.parse($("iv-evidence").value);
    const res = JSON.parse(intervals(JSON.stringify({ chosen, evidence })));
    show(out, JSON.stringify(res, null, 2));
    const ctx = $("iv-plot").getContext("2d");
    const { width: w, height: h } = ctx.canvas;
    axes(ctx, w, h);
    const end = Math.max(1, ...chosen.flat(), ...evidence.flat());
    const bar = (spans, y, color) => {
      ctx.fillStyle = color;
      spans.forEach(([a, b]) => ctx.fillRect((a / end) * w, y, ((b - a) / end) * w, 22));
    };
    bar(evidence, 12, "rgba(40,140,60,.6)");
    bar(chosen, 50, "rgba(40,80,200,.5)");
  } catch (e) {
    show(out, String(e), true);
  }
}

function runClip() {
  const ctx = $("cl-plot").getContext("2d");
  const { width: w, height: h } = ctx.canvas;
  try {
    const q = { advantage: +$("cl-adv").value, eps_low: +$("cl-lo").value, eps_high: +$("cl-hi").value, lo: 0.5, hi: 1.5, points: 201 };
    const pts = JSON.parse(clip(JSON.stringify(q)));
    const xs = pts.map((p) => p.ratio);
    const terms = pts.map((p) => p.term);
    const raw = pts.map((p) => p.ratio * q.advantage);
    const all = terms.concat(raw);
    const box = [0.5, 1.5, Math.min(...all), Math.max(...all)];
    axes(ctx, w, h);
    line(ctx, xs, raw, box, "#bbb");
    line(ctx, xs, terms, box, "#2050c0");
    ctx.fillStyle = "#c02020";
    pts.forEach((p) => { if (p.flat) ctx.fillRect(((p.ratio - 0.5) / 1.0) * w, h - 4, 2, 4); });
  } catch (e) {
    axes(ctx, w, h);
    ctx.fillStyle = "#b00";
    ctx.fillText(String(e), 10, 20);
  }
}

function runTrain() {
  const out = $("tr-out");
  show(out, "training...");
  setTimeout(() => {
    try {
      const q = { seed: +$("tr-seed").value, tasks: +$("tr-tasks").value, steps: +$("tr-steps").value };
      const res = JSON.parse(train(JSON.stringify(q)));
      const ctx = $("tr-plot").getContext("2d");
      const { width: w, height: h } = ctx.canvas;
      axes(ctx, w, h);
      const xs = res.rewards.map((_, i) => i);
      line(ctx, xs, res.rewards, [0, Math.max(1, xs.length - 1), 0, 3], "#2050c0");
      show(out, `accuracy ${res.accuracy_before.toFixed(3)} -> ${res.accuracy_after.toFixed(3)}\n` +
        `grounding IoU ${res.iou_before.toFixed(3)} -> ${res.iou_after.toFixed(3)}\n` +
        `mean reward first/last step ${res.rewards[0]?.toFixed(3)} / ${res.rewards.at(-1)?.toFixed(3)}`);
    } catch (e) {
      show(out, String(e), true);
    }
  }, 10);
}

await init();
$("iv-run").onclick = runIntervals;
$("cl-run").onclick = runClip;
$("tr-run").onclick = runTrain;
runIntervals();
runClip();
