import init, { Demo } from "./pkg/hinfctl_wasm_demo.js";

const $ = (id) => document.getElementById(id);
let demo = null;
let margin = null;

const fmt = (x) => (x === null || x === undefined ? "-" : Math.abs(x) >= 1e4 || (x !== 0 && Math.abs(x) < 1e-3) ? x.toExponential(3) : x.toFixed(4));
const tol = () => Math.pow(10, parseFloat($("tol").value));

function status(text) {
  $("status").textContent = text;
}

// run after the status text has been painted; the solvers block the page
function later(fn) {
  return new Promise((resolve) => setTimeout(() => resolve(fn()), 30));
}

function axes(ctx, w, h) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(40, 10);
  ctx.lineTo(40, h - 20);
  ctx.lineTo(w - 10, h - 20);
  ctx.stroke();
}

function drawSigma() {
  const c = $("sigma");
  const ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  if (!margin) return;
  const vals = margin.sigma.filter((s) => s > 0);
  if (vals.length === 0) return;
  const lo = Math.floor(Math.log10(Math.min(...vals, tol()))) - 1;
  const hi = Math.ceil(Math.log10(Math.max(...vals)));
  const y = (v) => 10 + (c.height - 30) * (hi - Math.log10(v)) / (hi - lo);
  const bw = (c.width - 60) / vals.length;
  vals.forEach((s, k) => {
    ctx.fillStyle = s >= tol() ? "#3367d6" : "#bbb";
    ctx.fillRect(45 + k * bw, y(s), Math.max(bw - 2, 1), c.height - 20 - y(s));
  });
  ctx.strokeStyle = "#c62828";
  ctx.beginPath();
  ctx.moveTo(40, y(tol()));
  ctx.lineTo(c.width - 10, y(tol()));
  ctx.stroke();
  ctx.fillStyle = "#333";
  ctx.fillText(`1e${hi}`, 2, 14);
  ctx.fillText(`1e${lo}`, 2, c.height - 22);
}

function drawTrace(t, y) {
  const c = $("trace");
  const ctx = c.getContext("2d");
  axes(ctx, c.width, c.height);
  const amp = Math.max(...y.map(Math.abs), 1e-300);
  const px = (ti) => 40 + (c.width - 50) * ti / t[t.length - 1];
  const py = (yi) => (c.height - 20) / 2 - (c.height - 40) / 2 * yi / amp;
  ctx.strokeStyle = "#3367d6";
  ctx.beginPath();
  t.forEach((ti, i) => (i ? ctx.lineTo(px(ti), py(y[i])) : ctx.moveTo(px(ti), py(y[i]))));
  ctx.stroke();
  ctx.fillStyle = "#333";
  ctx.fillText(`±${amp.toExponential(2)}`, 44, 14);
}

function showCertificate() {
  $("tolv").textContent = tol().toExponential(2);
  drawSigma();
  if (!demo) return;
  try {
    const c = JSON.parse(demo.certify(tol()));
    const ok = (b) => `<span class="${b ? "ok" : "bad"}">${b}</span>`;
    $("cert").innerHTML = `
      <tr><th>order r</th><td>${c.r}</td></tr>
      <tr><th>error bound eps</th><td>${fmt(c.eps)}</td></tr>
      <tr><th>a-priori test</th><td>${ok(c.apriori_ok)}</td></tr>
      <tr><th>performance bound</th><td>${fmt(c.gamma_gk)}</td></tr>
      <tr><th>closed-loop abscissa</th><td>${ok(c.abscissa < 0)} ${fmt(c.abscissa)}</td></tr>`;
  } catch (e) {
    $("cert").innerHTML = `<tr><td class="bad">${e.message ?? e}</td></tr>`;
  }
}

async function build() {
  $("build").disabled = $("sim").disabled = true;
  status("computing the margin...");
  try {
    const t0 = performance.now();
    demo = await later(() => new Demo($("kind").value, parseInt($("seed").value), parseInt($("unstable").value)));
    margin = JSON.parse(demo.margin());
    $("margin").innerHTML = `n_v = ${margin.n_v}, n_p = ${margin.n_p}, gamma = <b>${fmt(margin.gamma)}</b>,
      rho = ${fmt(margin.rho)}, ${margin.probes.length} probes`;
    status(`margin computed in ${((performance.now() - t0) / 1000).toFixed(1)} s`);
    showCertificate();
    $("sim").disabled = false;
  } catch (e) {
    demo = margin = null;
    status(`error: ${e.message ?? e}`);
  }
  $("build").disabled = false;
}

async function simulate() {
  status("simulating...");
  try {
    const open = JSON.parse(await later(() => demo.simulate(0, parseFloat($("tend").value))));
    const closed = JSON.parse(demo.simulate(tol(), parseFloat($("tend").value)));
    drawTrace(closed.t, closed.y);
    const word = (v) => (v.stabilized ? '<span class="ok">stabilized</span>' : `<span class="bad">not stabilized (${v.rationale})</span>`);
    $("verdict").innerHTML = `controller: ${word(closed)}; open loop: ${word(open)}`;
    status("done");
  } catch (e) {
    status(`error: ${e.message ?? e}`);
  }
}

await init();
$("build").disabled = false;
$("build").onclick = build;
$("sim").onclick = simulate;
$("tol").oninput = showCertificate;
$("kind").onchange = () => ($("unstable").disabled = $("kind").value === "toy");
showCertificate();
status("ready");
