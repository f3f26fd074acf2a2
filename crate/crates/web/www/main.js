import init, { renderMask, renderMix, renderUnmix } from "./pkg/mixmask_web.js";

const SCALE = 3;

function draw(canvas, r, scale) {
  const img = new ImageData(new Uint8ClampedArray(r.pixels()), r.width, r.height);
  const tmp = new OffscreenCanvas(r.width, r.height);
  tmp.getContext("2d").putImageData(img, 0, 0);
  canvas.width = r.width * scale;
  canvas.height = r.height * scale;
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function bind(id, render) {
  const root = document.getElementById(id);
  const out = root.querySelector(".out");
  const canvas = root.querySelector("canvas");
  const value = (name) => root.querySelector(`[name=${name}]`).value;
  const update = () => {
    try {
      const { rendered, label, scale } = render(value);
      draw(canvas, rendered, scale);
      out.textContent = label(rendered);
      out.classList.remove("err");
    } catch (e) {
      out.textContent = String(e.message ?? e);
      out.classList.add("err");
    }
  };
  root.querySelectorAll("input, select").forEach((el) => el.addEventListener("input", update));
  update();
}

await init();

bind("mask", (v) => ({
  rendered: renderMask(+v("grid"), +v("ratio"), v("pattern"), +v("seed"), 256),
  label: (r) => `λ = ${r.lambda.toFixed(4)}`,
  scale: 1,
}));

bind("mix", (v) => ({
  rendered: renderMix(+v("grid"), +v("ratio"), v("pattern"), v("fill"), +v("seed"), +v("a"), +v("b")),
  label: (r) => `λ = ${r.lambda.toFixed(4)}`,
  scale: SCALE,
}));

bind("unmix", (v) => ({
  rendered: renderUnmix(+v("lambda"), v("mode") === "global", +v("seed"), +v("a"), +v("b")),
  label: (r) => `effective λ = ${r.lambda.toFixed(4)}`,
  scale: SCALE,
}));
