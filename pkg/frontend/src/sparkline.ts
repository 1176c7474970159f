/** Map a value series to canvas polyline points (one point per value). */
export function sparklinePoints(
  values: number[],
  width: number,
  height: number,
  pad = 2,
): Array<[number, number]> {
  if (values.length === 0) {
    return [];
  }
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi - lo || 1;
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  const step = values.length > 1 ? innerW / (values.length - 1) : 0;
  return values.map((v, i) => [
    pad + i * step,
    pad + innerH * (1 - (v - lo) / span),
  ]);
}

export function drawSparkline(
  canvas: HTMLCanvasElement,
  values: number[],
  stroke = "#4aa3ff",
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) {
    return;
  }
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pts = sparklinePoints(values, canvas.width, canvas.height);
  if (pts.length < 2) {
    return;
  }
  ctx.beginPath();
  ctx.moveTo(pts[0][0], pts[0][1]);
  for (const [x, y] of pts.slice(1)) {
    ctx.lineTo(x, y);
  }
  ctx.strokeStyle = stroke;
  ctx.lineWidth = 1.5;
  ctx.stroke();
}
