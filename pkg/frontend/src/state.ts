/** Single source of truth for navigation: which episode, which frame.
 *
 * Every viewport renders from this store, which is what makes cursor
 * coherence a structural property instead of a synchronization chore.
 */

export interface PanelState {
  episodeId: number | null;
  t: number;
  episodeLength: number;
  /** bumped on every rebind; in-flight fetches for older views discard */
  epoch: number;
}

export type Listener = (s: Readonly<PanelState>) => void;

export class NavStore {
  private state: PanelState = {
    episodeId: null,
    t: 0,
    episodeLength: 0,
    epoch: 0,
  };
  private readonly listeners = new Set<Listener>();

  get(): Readonly<PanelState> {
    return this.state;
  }

  subscribe(fn: Listener): () => void {
    this.listeners.add(fn);
    return () => this.listeners.delete(fn);
  }

  /** Move the shared cursor; out-of-range values clamp to the nearest bound. */
  setActiveFrame(t: number): void {
    if (this.state.episodeId === null) return;
    const max = Math.max(0, this.state.episodeLength - 1);
    const clamped = Math.min(Math.max(Math.round(t), 0), max);
    if (clamped === this.state.t) return;
    this.state = { ...this.state, t: clamped };
    this.emit();
  }

  bindEpisode(id: number, length: number): void {
    this.state = {
      episodeId: id,
      t: 0,
      episodeLength: length,
      epoch: this.state.epoch + 1,
    };
    this.emit();
  }

  private emit(): void {
    for (const fn of [...this.listeners]) fn(this.state);
  }
}
