/** Control panel: run metrics, episode picker, and the frame slider
 * that drives the shared cursor.
 */

import type { Metrics } from "./api.js";

export interface PanelCallbacks {
  onLoadEpisode: (id: number) => void;
  onSetFrame: (t: number) => void;
  onProject: () => void;
}

function fmtNum(v: number | null): string {
  if (v === null || Number.isNaN(v)) return "–";
  return Number.isInteger(v) ? String(v) : v.toFixed(3);
}

export class ControlPanel {
  readonly el: HTMLElement;
  readonly slider: HTMLInputElement;
  readonly episodeInput: HTMLInputElement;
  private readonly metricsEl: HTMLElement;
  private readonly frameLabel: HTMLElement;
  private readonly episodeLabel: HTMLElement;
  private readonly message: HTMLElement;
  private readonly progress: HTMLElement;

  constructor(cb: PanelCallbacks) {
    this.el = document.createElement("div");
    this.el.className = "control-panel";

    this.metricsEl = document.createElement("dl");
    this.metricsEl.className = "metrics";
    this.el.appendChild(this.metricsEl);

    const picker = document.createElement("div");
    picker.className = "episode-picker";
    this.episodeInput = document.createElement("input");
    this.episodeInput.type = "number";
    this.episodeInput.min = "0";
    this.episodeInput.value = "0";
    const loadBtn = document.createElement("button");
    loadBtn.textContent = "load episode";
    loadBtn.addEventListener("click", () => {
      const id = Number(this.episodeInput.value);
      if (!Number.isInteger(id) || id < 0) {
        this.showMessage("episode id must be a non-negative integer");
        return;
      }
      cb.onLoadEpisode(id);
    });
    const projectBtn = document.createElement("button");
    projectBtn.textContent = "project buffer";
    projectBtn.addEventListener("click", () => cb.onProject());
    this.episodeLabel = document.createElement("span");
    this.episodeLabel.className = "episode-label";
    picker.append(this.episodeInput, loadBtn, projectBtn, this.episodeLabel);
    this.el.appendChild(picker);

    const scrubber = document.createElement("div");
    scrubber.className = "scrubber";
    this.slider = document.createElement("input");
    this.slider.type = "range";
    this.slider.min = "0";
    this.slider.max = "0";
    this.slider.value = "0";
    this.slider.addEventListener("input", () =>
      cb.onSetFrame(Number(this.slider.value)),
    );
    this.frameLabel = document.createElement("span");
    this.frameLabel.className = "frame-label";
    scrubber.append(this.slider, this.frameLabel);
    this.el.appendChild(scrubber);

    this.message = document.createElement("div");
    this.message.className = "message";
    this.message.hidden = true;
    this.el.appendChild(this.message);

    this.progress = document.createElement("div");
    this.progress.className = "progress";
    this.progress.hidden = true;
    this.el.appendChild(this.progress);
  }

  showMetrics(m: Metrics): void {
    const rows: [string, string][] = [
      ["episodes", `${m.episode_count} (${m.complete_count} complete)`],
      ["steps", String(m.step_count)],
      ["avg return", fmtNum(m.average_return)],
      ["avg length", fmtNum(m.average_length)],
      ["avg duration", `${fmtNum(m.average_duration_s)}s`],
    ];
    this.metricsEl.textContent = "";
    for (const [k, v] of rows) {
      const dt = document.createElement("dt");
      dt.textContent = k;
      const dd = document.createElement("dd");
      dd.textContent = v;
      this.metricsEl.append(dt, dd);
    }
  }

  setEpisode(id: number): void {
    this.episodeLabel.textContent = `viewing episode ${id}`;
    this.episodeInput.value = String(id);
  }

  /** Reflect the store's cursor so slider and plots never disagree. */
  setFrame(t: number, length: number): void {
    this.slider.max = String(Math.max(0, length - 1));
    this.slider.value = String(t);
    this.frameLabel.textContent = `t = ${t} / ${Math.max(0, length - 1)}`;
  }

  showMessage(text: string): void {
    this.message.textContent = text;
    this.message.hidden = false;
  }

  clearMessage(): void {
    this.message.hidden = true;
    this.message.textContent = "";
  }

  setProgress(p: number | null): void {
    if (p === null) {
      this.progress.hidden = true;
      this.progress.textContent = "";
    } else {
      this.progress.hidden = false;
      this.progress.textContent = `projecting… ${Math.round(p * 100)}%`;
    }
  }
}
