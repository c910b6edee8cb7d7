import init, {
  SearchDemo,
  latency_profile,
  compare_protocols,
  engine_info,
} from "./pkg/splitnas_demo.js";

const css = (name) =>
  getComputedStyle(document.documentElement).getPropertyValue(name).trim();

function clearCanvas(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  return ctx;
}

/* ------------------------------------------------------------------ */
/* Panel 1: search convergence                                        */
/* ------------------------------------------------------------------ */

let demo = null;
let running = false;
let history = [];

function drawTheta(snapshot) {
  const canvas = document.getElementById("theta-canvas");
  const ctx = clearCanvas(canvas);
  const dims = snapshot.dims;
  const groups = dims.length;
  const pad = 14;
  const groupWidth = (canvas.width - pad * (groups + 1)) / groups;
  const baseY = canvas.height - 26;
  const maxBar = baseY - 22;

  snapshot.theta.forEach((row, d) => {
    const x0 = pad + d * (groupWidth + pad);
    const barWidth = groupWidth / row.length - 3;
    const argmax = row.indexOf(Math.max(...row));
    row.forEach((p, k) => {
      const h = p * maxBar;
      const x = x0 + k * (groupWidth / row.length);
      ctx.fillStyle = k === argmax ? css("--accent") : "#39434f";
      ctx.fillRect(x, baseY - h, barWidth, h);
    });
    ctx.fillStyle = css("--muted");
    ctx.font = "12px system-ui";
    ctx.textAlign = "center";
    const label = d < groups - 1 ? `layer ${d}` : "split";
    ctx.fillText(label, x0 + groupWidth / 2, canvas.height - 8);
  });
}

function drawObjective(snapshot) {
  const canvas = document.getElementById("objective-canvas");
  const ctx = clearCanvas(canvas);
  if (history.length === 0) return;
  const pad = { l: 48, r: 12, t: 10, b: 22 };
  const w = canvas.width - pad.l - pad.r;
  const h = canvas.height - pad.t - pad.b;
  const maxT = snapshot.budget;
  const values = history.map((p) => p.combined);
  const yMax = Math.max(...values, snapshot.oracle_combined) * 1.1;
  const yMin = 0;
  const sx = (t) => pad.l + (t / maxT) * w;
  const sy = (v) => pad.t + h - ((v - yMin) / (yMax - yMin)) * h;

  ctx.strokeStyle = "#30363d";
  ctx.strokeRect(pad.l, pad.t, w, h);

  ctx.strokeStyle = css("--good");
  ctx.setLineDash([6, 4]);
  ctx.beginPath();
  ctx.moveTo(pad.l, sy(snapshot.oracle_combined));
  ctx.lineTo(pad.l + w, sy(snapshot.oracle_combined));
  ctx.stroke();
  ctx.setLineDash([]);

  ctx.strokeStyle = css("--accent");
  ctx.beginPath();
  history.forEach((point, i) => {
    const x = sx(point.t);
    const y = sy(point.combined);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();

  ctx.fillStyle = css("--muted");
  ctx.font = "12px system-ui";
  ctx.textAlign = "left";
  ctx.fillText(
    `objective of current argmax (green dashes: enumerated optimum ${snapshot.oracle_combined.toFixed(3)})`,
    pad.l + 6,
    pad.t + 14,
  );
  ctx.textAlign = "center";
  ctx.fillText(`iteration 0 … ${maxT}`, pad.l + w / 2, canvas.height - 6);
}

function renderSearch(snapshot) {
  drawTheta(snapshot);
  history.push({ t: snapshot.t, combined: snapshot.argmax.combined });
  drawObjective(snapshot);
  const a = snapshot.argmax;
  const matched = a.id === snapshot.oracle_id;
  document.getElementById("search-readout").innerHTML =
    `iteration <b>${snapshot.t}</b>/${snapshot.budget} — argmax: ` +
    `<b>[${a.blocks.join(", ")}]</b>, split <b>${a.split_position}</b>` +
    `${a.mid_block ? " (mid-block)" : ""} — latency <b>${a.latency_ms.toFixed(2)} ms</b> ` +
    `<span class="${a.feasible ? "ok" : "over"}">${a.feasible ? "meets" : "misses"} threshold</span>, ` +
    `objective <b>${a.combined.toFixed(3)}</b>` +
    (matched ? ' — <span class="ok">matches the enumerated optimum</span>' : "");
  return snapshot.done;
}

function resetSearch() {
  const seed = Number(document.getElementById("search-seed").value) >>> 0;
  demo = new SearchDemo(seed);
  history = [];
  running = false;
  document.getElementById("search-run").textContent = "run";
  renderSearch(JSON.parse(demo.step(0)));
}

function tick() {
  if (!running) return;
  const done = renderSearch(JSON.parse(demo.step(10)));
  if (done) {
    running = false;
    document.getElementById("search-run").textContent = "run";
    return;
  }
  requestAnimationFrame(tick);
}

/* ------------------------------------------------------------------ */
/* Panel 2: latency profile                                           */
/* ------------------------------------------------------------------ */

function renderLatency() {
  const extended = document.getElementById("lat-extended").checked;
  const seed = Number(document.getElementById("lat-seed").value) >>> 0;
  const mbps = Number(document.getElementById("lat-mbps").value);
  const tTh = Number(document.getElementById("lat-tth").value);
  document.getElementById("lat-mbps-value").textContent = mbps.toFixed(1);
  document.getElementById("lat-tth-value").textContent = tTh;

  const profile = JSON.parse(latency_profile(extended, seed, mbps, tTh));
  const canvas = document.getElementById("latency-canvas");
  const ctx = clearCanvas(canvas);
  const pad = { l: 52, r: 12, t: 12, b: 30 };
  const w = canvas.width - pad.l - pad.r;
  const h = canvas.height - pad.t - pad.b;
  const rows = profile.rows;
  const maxTotal = Math.max(...rows.map((r) => r.total_ms), tTh) * 1.08;
  const barW = (w / rows.length) * 0.72;
  const sy = (v) => pad.t + h - (v / maxTotal) * h;

  ctx.strokeStyle = "#30363d";
  ctx.strokeRect(pad.l, pad.t, w, h);

  rows.forEach((row, i) => {
    const x = pad.l + (i + 0.14) * (w / rows.length);
    let y = pad.t + h;
    for (const [key, color] of [
      ["head_comp_ms", css("--head")],
      ["comm_ms", css("--comm")],
      ["tail_comp_ms", css("--tail")],
    ]) {
      const seg = (row[key] / maxTotal) * h;
      y -= seg;
      ctx.fillStyle = color;
      ctx.fillRect(x, y, barW, seg);
    }
    if (row.feasible) {
      ctx.fillStyle = css("--good");
      ctx.fillRect(x, pad.t + h + 3, barW, 3);
    }
    if (row.mid_block) {
      ctx.fillStyle = css("--ink");
      ctx.font = "10px system-ui";
      ctx.textAlign = "center";
      ctx.fillText("◂", x + barW / 2, sy(row.total_ms) - 3);
    }
    if (i % 2 === 0) {
      ctx.fillStyle = css("--muted");
      ctx.font = "10px system-ui";
      ctx.textAlign = "center";
      ctx.fillText(String(row.split_position), x + barW / 2, canvas.height - 12);
    }
  });

  ctx.strokeStyle = css("--bad");
  ctx.setLineDash([7, 5]);
  ctx.beginPath();
  ctx.moveTo(pad.l, sy(tTh));
  ctx.lineTo(pad.l + w, sy(tTh));
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.fillStyle = css("--muted");
  ctx.font = "12px system-ui";
  ctx.textAlign = "left";
  ctx.fillText(`threshold ${tTh} ms`, pad.l + 6, sy(tTh) - 5);
  ctx.fillText("split position →", pad.l + 6, canvas.height - 2);

  const feasible = rows.filter((r) => r.feasible);
  const best = rows.reduce((a, b) => (a.total_ms < b.total_ms ? a : b));
  document.getElementById("latency-readout").innerHTML =
    `architecture: <b>[${profile.blocks.join(", ")}]</b><br>` +
    `<span style="color:${css("--head")}">&#9632;</span> head compute &nbsp;` +
    `<span style="color:${css("--comm")}">&#9632;</span> transmission &nbsp;` +
    `<span style="color:${css("--tail")}">&#9632;</span> tail compute &nbsp;|&nbsp; ` +
    `<b>${feasible.length}</b>/${rows.length} splits meet the threshold; ` +
    `fastest: split <b>${best.split_position}</b> at <b>${best.total_ms.toFixed(2)} ms</b> ` +
    `(${best.intermediate_elements} elements over the link)`;
}

/* ------------------------------------------------------------------ */
/* Panel 3: protocol comparison                                       */
/* ------------------------------------------------------------------ */

function renderComparison() {
  const button = document.getElementById("cmp-run");
  button.disabled = true;
  setTimeout(() => {
    const seeds = Math.max(1, Math.min(40, Number(document.getElementById("cmp-seeds").value)));
    const data = JSON.parse(compare_protocols(seeds, 2000));
    const canvas = document.getElementById("compare-canvas");
    const ctx = clearCanvas(canvas);
    const pad = { l: 52, r: 12, t: 12, b: 34 };
    const w = canvas.width - pad.l - pad.r;
    const h = canvas.height - pad.t - pad.b;
    const xMax = Math.max(...data.points.map((p) => p.latency_ms), data.t_th_ms) * 1.1;
    const yMax = Math.max(...data.points.map((p) => p.loss)) * 1.15;
    const sx = (v) => pad.l + (v / xMax) * w;
    const sy = (v) => pad.t + h - (v / yMax) * h;

    ctx.strokeStyle = "#30363d";
    ctx.strokeRect(pad.l, pad.t, w, h);
    ctx.strokeStyle = css("--bad");
    ctx.setLineDash([7, 5]);
    ctx.beginPath();
    ctx.moveTo(sx(data.t_th_ms), pad.t);
    ctx.lineTo(sx(data.t_th_ms), pad.t + h);
    ctx.stroke();
    ctx.setLineDash([]);

    for (const p of data.points) {
      const x = sx(p.latency_ms);
      const y = sy(p.loss);
      if (p.method === "nasc") {
        ctx.fillStyle = css("--accent");
        ctx.beginPath();
        ctx.arc(x, y, 5, 0, Math.PI * 2);
        ctx.fill();
      } else {
        ctx.strokeStyle = css("--comm");
        ctx.lineWidth = 2;
        ctx.beginPath();
        ctx.moveTo(x - 5, y - 5);
        ctx.lineTo(x + 5, y + 5);
        ctx.moveTo(x - 5, y + 5);
        ctx.lineTo(x + 5, y - 5);
        ctx.stroke();
        ctx.lineWidth = 1;
      }
    }
    ctx.fillStyle = css("--muted");
    ctx.font = "12px system-ui";
    ctx.textAlign = "center";
    ctx.fillText("end-to-end latency (ms) →", pad.l + w / 2, canvas.height - 6);
    ctx.textAlign = "left";
    ctx.fillText(`threshold ${data.t_th_ms} ms`, sx(data.t_th_ms) + 6, pad.t + 14);
    ctx.fillText("● joint search    ✕ communication-blind", pad.l + 8, pad.t + 14);
    ctx.save();
    ctx.translate(14, pad.t + h / 2);
    ctx.rotate(-Math.PI / 2);
    ctx.textAlign = "center";
    ctx.fillText("packet-loss-averaged loss →", 0, 0);
    ctx.restore();

    const nasc = data.points.filter((p) => p.method === "nasc");
    const blind = data.points.filter((p) => p.method === "hwnas");
    const feasible = (list) => list.filter((p) => p.feasible).length;
    document.getElementById("compare-readout").innerHTML =
      `joint search: <b class="ok">${feasible(nasc)}/${nasc.length}</b> runs meet the threshold — ` +
      `communication-blind: <b class="over">${feasible(blind)}/${blind.length}</b>`;
    button.disabled = false;
  }, 30);
}

/* ------------------------------------------------------------------ */

init().then(() => {
  document.getElementById("search-run").addEventListener("click", () => {
    if (running) {
      running = false;
      document.getElementById("search-run").textContent = "run";
    } else {
      if (demo === null) resetSearch();
      running = true;
      document.getElementById("search-run").textContent = "pause";
      requestAnimationFrame(tick);
    }
  });
  document.getElementById("search-reset").addEventListener("click", resetSearch);
  document.getElementById("search-seed").addEventListener("change", resetSearch);

  for (const id of ["lat-extended", "lat-mbps", "lat-tth"]) {
    document.getElementById(id).addEventListener("input", renderLatency);
  }
  document.getElementById("lat-resample").addEventListener("click", () => {
    const field = document.getElementById("lat-seed");
    field.value = String((Number(field.value) + 1) >>> 0);
    renderLatency();
  });
  document.getElementById("lat-seed").addEventListener("change", renderLatency);
  document.getElementById("cmp-run").addEventListener("click", renderComparison);

  const info = JSON.parse(engine_info());
  document.getElementById("footer").insertAdjacentHTML(
    "beforeend",
    `<br>search benchmark: <code>${info.benchmark_space}</code> ` +
      `(${info.members} members, threshold ${info.t_th_ms} ms, ` +
      `${info.iterations} update iterations).`,
  );

  resetSearch();
  renderLatency();
});
