import init, { Demo } from "./pkg/gridvolt_wasm.js";

const $ = (id) => document.getElementById(id);
let demo = null;
let summary = null;

function log(msg) {
  $("log").textContent = msg;
}

function drawProfiles(result) {
  const canvas = $("plot");
  const ctx = canvas.getContext("2d");
  const w = canvas.width, h = canvas.height, pad = 40;
  ctx.clearRect(0, 0, w, h);
  const n = summary.buses;
  const series = [
    [summary.vmin, "#bbb"],
    [summary.vmax, "#bbb"],
    result.oracle ? [result.oracle.vm, "#222"] : null,
    [result.predicted.vm, "#d62728"],
    [result.corrected.vm, "#1f77b4"],
  ].filter(Boolean);
  const all = series.flatMap(([v]) => v);
  const lo = Math.min(...all) - 0.005, hi = Math.max(...all) + 0.005;
  const x = (i) => pad + (i * (w - 2 * pad)) / Math.max(n - 1, 1);
  const y = (v) => h - pad - ((v - lo) * (h - 2 * pad)) / (hi - lo);

  ctx.strokeStyle = "#999";
  ctx.fillStyle = "#444";
  ctx.font = "12px sans-serif";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad, h - pad);
  ctx.stroke();
  for (let k = 0; k <= 4; k++) {
    const v = lo + ((hi - lo) * k) / 4;
    ctx.fillText(v.toFixed(3), 2, y(v) + 4);
  }
  ctx.fillText("bus position", w / 2 - 30, h - 10);
  ctx.fillText("vm (p.u.)", pad + 4, pad - 8);

  for (const [values, color] of series) {
    ctx.strokeStyle = color;
    ctx.lineWidth = color === "#bbb" ? 1 : 2;
    ctx.beginPath();
    values.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
    ctx.stroke();
  }
}

function maxAbsDiff(a, b) {
  return a.reduce((m, v, i) => Math.max(m, Math.abs(v - b[i])), 0);
}

function showStats(r) {
  const lines = [];
  if (r.oracle) {
    lines.push(`solver     cost ${r.oracle.objective.toFixed(2)} $/h in ${r.oracle.ms.toFixed(1)} ms`);
    lines.push(`predicted  cost ${r.predicted.objective.toFixed(2)} $/h in ${r.predicted.ms.toFixed(2)} ms, max |dvm| ${maxAbsDiff(r.predicted.vm, r.oracle.vm).toExponential(2)}`);
    lines.push(`corrected  cost ${r.corrected.objective.toFixed(2)} $/h in ${r.corrected.ms.toFixed(2)} ms, gap ${r.gap_pct.toFixed(3)} %`);
  } else {
    lines.push("solver did not converge for this load (likely infeasible)");
    lines.push(`predicted  cost ${r.predicted.objective.toFixed(2)} $/h`);
    lines.push(`corrected  cost ${r.corrected.objective.toFixed(2)} $/h`);
  }
  $("stats").textContent = lines.join("\n");
}

function guard(fn) {
  return () => {
    try {
      fn();
    } catch (e) {
      log(`error: ${e.message ?? e}`);
    }
  };
}

$("load").onclick = guard(() => {
  demo = new Demo($("case").value);
  summary = JSON.parse(demo.summary());
  $("train").disabled = false;
  $("compare").disabled = true;
  log(`${$("case").value}: ${summary.buses} buses, ${summary.generators} generators, ${summary.branches} branches`);
});

$("train").onclick = () => {
  log("solving scenarios and training…");
  // let the message paint before the blocking call
  setTimeout(guard(() => {
    const t = JSON.parse(demo.train(+$("samples").value, +$("epochs").value, +$("seed").value, $("hidden").value));
    $("compare").disabled = false;
    log(`trained ${t.hidden.length ? t.hidden.join("/") : "affine"} nets for ${t.epochs} epochs on ${t.samples} samples (${t.dropped} infeasible dropped)\n` +
        `solving ${(t.solve_ms / 1000).toFixed(1)} s, training ${(t.train_ms / 1000).toFixed(1)} s, loss vm ${t.vm_loss.toExponential(2)} va ${t.va_loss.toExponential(2)}`);
  }), 20);
};

const compare = guard(() => {
  if (!demo || $("compare").disabled) return;
  const r = JSON.parse(demo.compare(+$("scale").value, +$("scenario").value));
  drawProfiles(r);
  showStats(r);
});
$("compare").onclick = compare;
$("scale").oninput = () => {
  $("scaleval").textContent = (+$("scale").value).toFixed(2);
  compare();
};

init().then(() => log("ready: load a case"));
