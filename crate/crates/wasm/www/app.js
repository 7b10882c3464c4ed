import init, { design, limiting_sssd, power_curve } from "./pkg/sssd_wasm.js";

const SETTINGS = {
  a: { gamma: 0.5, target_power: 0.6, delta_star: 0.25 },
  b: { gamma: 0.9, target_power: 0.7, delta_star: 0.3 },
  c: { gamma: 0.8, target_power: 0.8, delta_star: 0.15 },
};

const INFORMATIVE = {
  group1: [{ dist: "gamma", shape: 33.79, rate: 15.66 }, { dist: "gamma", shape: 26.96, rate: 37.92 }],
  group2: [{ dist: "gamma", shape: 105.53, rate: 42.97 }, { dist: "gamma", shape: 85.43, rate: 106.31 }],
};

const $ = (id) => document.getElementById(id);

function config() {
  const s = SETTINGS[$("setting").value];
  const cfg = {
    design: {
      family: "gamma",
      eta1: [2.11, 0.69],
      eta2: [2.43, 0.79],
      characteristic: { kind: "tail_probability", threshold: 4.29 },
      comparison: "log_ratio",
    },
    test: {
      rope: { kind: "equivalence", delta_star: s.delta_star },
      gamma: s.gamma,
      target_power: s.target_power,
    },
    q: Number($("q").value),
    seed: Number($("seed").value),
  };
  if ($("informative").checked) cfg.priors = INFORMATIVE;
  return JSON.stringify(cfg);
}

function draw(series, marker) {
  const c = $("plot");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const pts = series.flatMap((s) => s.points);
  if (!pts.length) return;
  const xmin = Math.min(...pts.map((p) => p[0]));
  const xmax = Math.max(...pts.map((p) => p[0]));
  const pad = 40;
  const sx = (x) => pad + ((x - xmin) / (xmax - xmin || 1)) * (c.width - 2 * pad);
  const sy = (y) => c.height - pad - y * (c.height - 2 * pad);
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, c.width - 2 * pad, c.height - 2 * pad);
  g.fillStyle = "#333";
  g.fillText(xmin.toFixed(0), pad, c.height - pad + 14);
  g.fillText(xmax.toFixed(0), c.width - pad - 30, c.height - pad + 14);
  g.fillText("1", pad - 14, pad + 4);
  g.fillText("0", pad - 14, c.height - pad + 4);
  for (const s of series) {
    g.strokeStyle = s.color;
    g.beginPath();
    s.points.forEach(([x, y], i) => (i ? g.lineTo(sx(x), sy(y)) : g.moveTo(sx(x), sy(y))));
    g.stroke();
  }
  if (marker !== undefined) {
    g.strokeStyle = "#b00";
    g.beginPath();
    g.moveTo(sx(marker), pad);
    g.lineTo(sx(marker), c.height - pad);
    g.stroke();
  }
}

function run(f) {
  $("out").className = "";
  try {
    f();
  } catch (e) {
    $("out").className = "error";
    $("out").textContent = String(e);
  }
}

$("run-curve").onclick = () =>
  run(() => {
    const r = JSON.parse(power_curve(config()));
    draw([{ points: r.knots, color: "#36c" }], r.mu_l);
    $("out").textContent = `mu_l = ${r.mu_l.toFixed(2)}, calibrated l = ${r.l.toFixed(4)}, censored draws ${r.censored}`;
  });

$("run-limiting").onclick = () =>
  run(() => {
    const r = JSON.parse(limiting_sssd(config(), Number($("l").value), Number($("alpha").value)));
    const [lo, hi] = r.probable_domain;
    $("out").textContent =
      `mu_l = ${r.mu_l.toFixed(2)}, sigma_l = ${r.sigma_l.toFixed(2)}, ` +
      `probable domain [${lo.toFixed(1)}, ${hi.toFixed(1)}], theta0 = ${r.theta0.toFixed(5)}`;
  });

$("run-design").onclick = () =>
  run(() => {
    const r = JSON.parse(design(config()));
    const rec = r.recommendation;
    draw(
      [
        { points: r.curves.limiting, color: "#36c" },
        { points: r.curves.adjusted, color: "#c63" },
      ],
      rec.n_recommended,
    );
    $("out").textContent =
      `n recommended = ${rec.n_recommended} (SSSD quantile ${rec.p_tilde.toFixed(3)})\n` +
      `mu_hat = ${rec.mu_hat.toFixed(2)}, sigma_hat = ${rec.sigma_hat.toFixed(2)}, ${rec.classification}\n` +
      r.warnings.map((w) => `${w.kind}: ${w.message}`).join("\n");
  });

await init();
$("run-curve").click();
