/** Viewport base class and the four concrete kinds.
 *
 * Everything renders as plain DOM and inline SVG so the widgets carry
 * no drawing dependencies and stay scriptable in tests. Values are
 * plotted as served; the only client-side math is axis scaling.
 */

export type ViewportKind =
  | "line-plot"
  | "image-buffer"
  | "scatter-plot"
  | "histogram";

const SVG_NS = "http://www.w3.org/2000/svg";

function svgEl<K extends keyof SVGElementTagNameMap>(
  tag: K,
  attrs: Record<string, string | number> = {},
): SVGElementTagNameMap[K] {
  const el = document.createElementNS(SVG_NS, tag);
  for (const [k, v] of Object.entries(attrs)) el.setAttribute(k, String(v));
  return el;
}

function fmt(v: number): string {
  return Number.isInteger(v) ? String(v) : String(Number(v.toPrecision(4)));
}

export abstract class Viewport {
  abstract readonly kind: ViewportKind;
  readonly el: HTMLElement;
  protected t = 0;

  protected constructor(className: string) {
    this.el = document.createElement("div");
    this.el.className = `viewport ${className}`;
  }

  /** The active timestep this viewport is currently showing. */
  get cursor(): number {
    return this.t;
  }

  setCursor(t: number): void {
    this.t = t;
    this.renderCursor();
  }

  protected abstract renderCursor(): void;
}

export const PLOT_W = 600;
export const PLOT_H = 120;

export class LinePlotViewport extends Viewport {
  readonly kind: ViewportKind = "line-plot";
  private readonly svg: SVGSVGElement;
  private readonly cursorLine: SVGLineElement;
  private readonly readout: HTMLElement;

  constructor(
    readonly label: string,
    readonly series: number[],
    onSelect: (t: number) => void,
  ) {
    super("line-plot");
    const header = document.createElement("header");
    header.textContent = label;
    this.readout = document.createElement("span");
    this.readout.className = "readout";
    header.appendChild(this.readout);
    this.el.appendChild(header);

    this.svg = svgEl("svg", {
      viewBox: `0 0 ${PLOT_W} ${PLOT_H}`,
      preserveAspectRatio: "none",
    });
    this.svg.appendChild(
      svgEl("polyline", { points: this.path(), fill: "none", class: "series" }),
    );
    this.cursorLine = svgEl("line", { y1: 0, y2: PLOT_H, class: "cursor" });
    this.svg.appendChild(this.cursorLine);
    // a click anywhere on the plot jumps the shared cursor there
    this.svg.addEventListener("click", (ev) =>
      onSelect(this.timeAtClientX(ev.clientX)),
    );
    this.el.appendChild(this.svg);
    this.renderCursor();
  }

  /** Map a pointer position to the nearest timestep under it. */
  timeAtClientX(clientX: number): number {
    const rect = this.svg.getBoundingClientRect();
    const frac = rect.width > 0 ? (clientX - rect.left) / rect.width : 0;
    return Math.round(frac * (this.series.length - 1));
  }

  private xAt(t: number): number {
    const n = this.series.length;
    return n < 2 ? PLOT_W / 2 : (t / (n - 1)) * PLOT_W;
  }

  private path(): string {
    let lo = Infinity;
    let hi = -Infinity;
    for (const v of this.series) {
      lo = Math.min(lo, v);
      hi = Math.max(hi, v);
    }
    const span = hi - lo || 1;
    return this.series
      .map((v, t) => {
        const y = PLOT_H - 4 - ((v - lo) / span) * (PLOT_H - 8);
        return `${this.xAt(t)},${y}`;
      })
      .join(" ");
  }

  protected renderCursor(): void {
    const x = this.xAt(this.t);
    this.cursorLine.setAttribute("x1", String(x));
    this.cursorLine.setAttribute("x2", String(x));
    const v = this.series[this.t];
    this.readout.textContent = v === undefined ? "" : `t=${this.t}  ${fmt(v)}`;
  }
}

export class ImageBufferViewport extends Viewport {
  readonly kind: ViewportKind = "image-buffer";
  private readonly img: HTMLImageElement;
  private readonly caption: HTMLElement;

  constructor(private readonly urlFor: (t: number) => string) {
    super("image-buffer");
    const header = document.createElement("header");
    header.textContent = "frames";
    this.el.appendChild(header);
    this.img = document.createElement("img");
    this.img.alt = "episode frame";
    this.el.appendChild(this.img);
    this.caption = document.createElement("div");
    this.caption.className = "caption";
    this.el.appendChild(this.caption);
    this.renderCursor();
  }

  protected renderCursor(): void {
    this.img.src = this.urlFor(this.t);
    this.caption.textContent = `frame ${this.t}`;
  }
}

export const HISTOGRAM_WINDOW = 50;

export interface HistogramBins {
  counts: number[];
  labels: string[];
}

/**
 * Bin a window of action samples. Integer-valued windows get one bin
 * per integer over [min, max]; anything else gets `bins` equal-width
 * bins with the maximum landing in the last. Mirrors the server's
 * binning rules so the two views of the same data agree.
 */
export function histogram(values: number[], bins = 10): HistogramBins {
  if (values.length === 0) return { counts: [], labels: [] };
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    lo = Math.min(lo, v);
    hi = Math.max(hi, v);
  }
  const integral = values.every((v) => Number.isInteger(v));
  if (integral && hi - lo < 64) {
    const counts = new Array<number>(hi - lo + 1).fill(0);
    for (const v of values) counts[v - lo] += 1;
    return { counts, labels: counts.map((_, i) => String(lo + i)) };
  }
  if (hi === lo) return { counts: [values.length], labels: [fmt(lo)] };
  const counts = new Array<number>(bins).fill(0);
  const width = hi - lo;
  for (const v of values) {
    const idx = v === hi ? bins - 1 : Math.floor((bins * (v - lo)) / width);
    counts[idx] += 1;
  }
  const labels = counts.map((_, i) =>
    fmt(lo + ((i + 0.5) * width) / bins),
  );
  return { counts, labels };
}

export class HistogramViewport extends Viewport {
  readonly kind: ViewportKind = "histogram";
  private readonly svg: SVGSVGElement;
  private readonly caption: HTMLElement;

  constructor(
    readonly label: string,
    private readonly series: number[],
    private readonly bins = 10,
  ) {
    super("histogram");
    const header = document.createElement("header");
    header.textContent = label;
    this.el.appendChild(header);
    this.svg = svgEl("svg", {
      viewBox: `0 0 ${PLOT_W} ${PLOT_H}`,
      preserveAspectRatio: "none",
    });
    this.el.appendChild(this.svg);
    this.caption = document.createElement("div");
    this.caption.className = "caption";
    this.el.appendChild(this.caption);
    this.renderCursor();
  }

  /** The trailing window of samples the current cursor selects. */
  windowAt(t: number): number[] {
    const from = Math.max(0, t - HISTOGRAM_WINDOW + 1);
    return this.series.slice(from, t + 1);
  }

  protected renderCursor(): void {
    const win = this.windowAt(this.t);
    const { counts } = histogram(win, this.bins);
    this.svg.textContent = "";
    const peak = Math.max(1, ...counts);
    const barW = PLOT_W / Math.max(1, counts.length);
    counts.forEach((c, i) => {
      const h = (c / peak) * (PLOT_H - 8);
      this.svg.appendChild(
        svgEl("rect", {
          x: i * barW + 1,
          y: PLOT_H - h,
          width: Math.max(1, barW - 2),
          height: h,
          class: "bar",
        }),
      );
    });
    this.caption.textContent = `last ${win.length} steps ending t=${this.t}`;
  }
}

export interface ProjectionPick {
  episodeId: number;
  t: number;
}

export const SCATTER_W = 420;
export const SCATTER_H = 320;

export class ProjectionViewport extends Viewport {
  readonly kind: ViewportKind = "scatter-plot";
  private readonly circles: SVGCircleElement[] = [];
  private readonly tooltip: HTMLElement;
  private activeEpisode: number | null = null;
  private hoverToken = 0;

  constructor(
    points: [number, number][],
    private readonly refs: [number, number][],
    onPick: (pick: ProjectionPick) => void,
    private readonly describe?: (ep: number, t: number) => Promise<string>,
  ) {
    super("scatter-plot");
    const header = document.createElement("header");
    header.textContent = `replay buffer (${points.length} points)`;
    this.el.appendChild(header);

    const svg = svgEl("svg", { viewBox: `0 0 ${SCATTER_W} ${SCATTER_H}` });
    let xLo = Infinity;
    let xHi = -Infinity;
    let yLo = Infinity;
    let yHi = -Infinity;
    for (const [x, y] of points) {
      xLo = Math.min(xLo, x);
      xHi = Math.max(xHi, x);
      yLo = Math.min(yLo, y);
      yHi = Math.max(yHi, y);
    }
    const xSpan = xHi - xLo || 1;
    const ySpan = yHi - yLo || 1;
    const pad = 12;
    points.forEach(([x, y], i) => {
      const [ep, t] = this.refs[i];
      const c = svgEl("circle", {
        cx: pad + ((x - xLo) / xSpan) * (SCATTER_W - 2 * pad),
        cy: SCATTER_H - pad - ((y - yLo) / ySpan) * (SCATTER_H - 2 * pad),
        r: 4,
        class: "pt",
      });
      c.dataset.episode = String(ep);
      c.dataset.t = String(t);
      c.addEventListener("click", () => onPick({ episodeId: ep, t }));
      c.addEventListener("mouseenter", () => void this.showTooltip(ep, t));
      c.addEventListener("mouseleave", () => this.hideTooltip());
      svg.appendChild(c);
      this.circles.push(c);
    });
    this.el.appendChild(svg);

    this.tooltip = document.createElement("div");
    this.tooltip.className = "tooltip";
    this.tooltip.hidden = true;
    this.el.appendChild(this.tooltip);
  }

  /** Highlight follows the active episode as well as the frame cursor. */
  setActiveEpisode(id: number | null): void {
    this.activeEpisode = id;
    this.renderCursor();
  }

  protected renderCursor(): void {
    this.circles.forEach((c, i) => {
      const [ep, t] = this.refs[i];
      const active = ep === this.activeEpisode && t === this.t;
      c.classList.toggle("active", active);
    });
  }

  private async showTooltip(ep: number, t: number): Promise<void> {
    const token = ++this.hoverToken;
    this.tooltip.hidden = false;
    this.tooltip.textContent = `episode ${ep} · t ${t}`;
    if (!this.describe) return;
    const detail = await this.describe(ep, t).catch(() => "");
    // discard if the pointer moved on while the lookup was in flight
    if (detail && token === this.hoverToken && !this.tooltip.hidden) {
      this.tooltip.textContent = `episode ${ep} · t ${t} — ${detail}`;
    }
  }

  private hideTooltip(): void {
    this.hoverToken += 1;
    this.tooltip.hidden = true;
  }
}
