/** Dashboard composition root.
 *
 * One NavStore drives every viewport: plots, frame images, the
 * projection highlight, and the scrubber all render from the same
 * (episode, t) pair, so they cannot drift apart.
 */

import { Api, ApiError } from "./api.js";
import type { Episode, Metrics, ProjectionParams, SchemaInfo } from "./api.js";
import { ControlPanel } from "./panel.js";
import { NavStore } from "./state.js";
import {
  HistogramViewport,
  ImageBufferViewport,
  LinePlotViewport,
  ProjectionViewport,
  Viewport,
} from "./viewports.js";
import type { ProjectionPick } from "./viewports.js";

export interface AppOptions {
  /** metrics refresh period in ms; 0 disables polling (tests) */
  pollMs?: number;
  /** how often to re-ask for a projection still being computed */
  projectionPollMs?: number;
}

/** How many viewports an episode with this schema gets. */
export function countViewports(schema: SchemaInfo): number {
  const flat = (dims: number[]) => dims.reduce((a, b) => a * b, 1);
  return (
    flat(schema.obs_dim) +
    flat(schema.action_dim) +
    schema.reward_dim +
    (schema.has_frames ? 1 : 0)
  );
}

export class App {
  readonly store = new NavStore();
  readonly panel: ControlPanel;
  viewports: Viewport[] = [];
  projection: ProjectionViewport | null = null;

  private readonly grid: HTMLElement;
  private readonly projectionHost: HTMLElement;
  private navToken = 0;
  private timer: ReturnType<typeof setInterval> | null = null;
  private readonly stepCache = new Map<string, Promise<string>>();
  private readonly projectionPollMs: number;

  constructor(
    root: HTMLElement,
    private readonly api: Api,
    private readonly opts: AppOptions = {},
  ) {
    this.projectionPollMs = opts.projectionPollMs ?? 500;
    this.panel = new ControlPanel({
      onLoadEpisode: (id) => void this.loadEpisode(id),
      onSetFrame: (t) => this.store.setActiveFrame(t),
      onProject: () => void this.showProjection({}),
    });
    root.appendChild(this.panel.el);
    this.grid = document.createElement("div");
    this.grid.className = "viewports";
    root.appendChild(this.grid);
    this.projectionHost = document.createElement("div");
    this.projectionHost.className = "projection-host";
    root.appendChild(this.projectionHost);

    this.store.subscribe((s) => {
      for (const v of this.viewports) v.setCursor(s.t);
      if (this.projection) {
        this.projection.setActiveEpisode(s.episodeId);
        this.projection.setCursor(s.t);
      }
      this.panel.setFrame(s.t, s.episodeLength);
      if (s.episodeId !== null) this.panel.setEpisode(s.episodeId);
    });
  }

  async start(): Promise<void> {
    const m = await this.refreshMetrics();
    if (m && m.episode_count > 0) await this.loadEpisode(0);
    const pollMs = this.opts.pollMs ?? 0;
    if (pollMs > 0) {
      this.timer = setInterval(() => void this.refreshMetrics(), pollMs);
    }
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  async loadEpisode(id: number): Promise<void> {
    const token = ++this.navToken;
    let ep: Episode;
    try {
      ep = await this.api.episode(id);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        // keep whatever is on screen; just say the id doesn't resolve
        this.panel.showMessage(`episode ${id} not found`);
        return;
      }
      this.panel.showMessage(`episode ${id}: ${String(err)}`);
      return;
    }
    if (token !== this.navToken) return; // a newer navigation won
    this.panel.clearMessage();
    this.rebuildViewports(ep);
    this.store.bindEpisode(ep.id, ep.n_steps);
  }

  /** Jump to a concrete (episode, frame), e.g. from a projection point. */
  async navigateTo(pick: ProjectionPick): Promise<void> {
    if (this.store.get().episodeId !== pick.episodeId) {
      await this.loadEpisode(pick.episodeId);
      if (this.store.get().episodeId !== pick.episodeId) return;
    }
    this.store.setActiveFrame(pick.t);
  }

  async showProjection(params: ProjectionParams): Promise<void> {
    this.panel.setProgress(0);
    let proj;
    try {
      proj = await this.api.projection(
        params,
        (p) => this.panel.setProgress(p),
        this.projectionPollMs,
      );
    } catch (err) {
      this.panel.showMessage(`projection failed: ${String(err)}`);
      return;
    } finally {
      this.panel.setProgress(null);
    }
    this.projection = new ProjectionViewport(
      proj.points,
      proj.refs,
      (pick) => void this.navigateTo(pick),
      (ep, t) => this.stepPreview(ep, t),
    );
    const s = this.store.get();
    this.projection.setActiveEpisode(s.episodeId);
    this.projection.setCursor(s.t);
    this.projectionHost.textContent = "";
    this.projectionHost.appendChild(this.projection.el);
  }

  async refreshMetrics(): Promise<Metrics | null> {
    try {
      const m = await this.api.metrics();
      this.panel.showMetrics(m);
      return m;
    } catch (err) {
      this.panel.showMessage(`server unreachable: ${String(err)}`);
      return null;
    }
  }

  private rebuildViewports(ep: Episode): void {
    const jump = (t: number) => this.store.setActiveFrame(t);
    const next: Viewport[] = [];
    ep.state_series.forEach((series, i) =>
      next.push(new LinePlotViewport(`state[${i}]`, series, jump)),
    );
    ep.action_series.forEach((series, i) =>
      next.push(new LinePlotViewport(`action[${i}]`, series, jump)),
    );
    ep.reward_series.forEach((series, i) =>
      next.push(new LinePlotViewport(`reward[${i}]`, series, jump)),
    );
    if (ep.has_frames) {
      next.push(
        new ImageBufferViewport((t) => this.api.frameImageUrl(ep.id, t)),
      );
    }
    if (ep.action_series.length > 0) {
      next.push(new HistogramViewport("action[0] window", ep.action_series[0]));
    }
    this.viewports = next;
    this.grid.textContent = "";
    for (const v of next) this.grid.appendChild(v.el);
  }

  private stepPreview(ep: number, t: number): Promise<string> {
    const key = `${ep}:${t}`;
    let p = this.stepCache.get(key);
    if (!p) {
      const compact = (v: unknown) =>
        JSON.stringify(v, (_, x: unknown) =>
          typeof x === "number" ? Number(x.toPrecision(3)) : x,
        );
      p = this.api
        .step(ep, t)
        .then(
          (s) =>
            `s=${compact(s.s)} a=${compact(s.a)} r=${compact(s.r)}` +
            (s.done ? " done" : ""),
        );
      this.stepCache.set(key, p);
    }
    return p;
  }
}
