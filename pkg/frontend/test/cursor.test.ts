import { afterEach, describe, expect, it } from "vitest";

import { Api } from "../src/api.js";
import { App, countViewports } from "../src/app.js";
import {
  HISTOGRAM_WINDOW,
  HistogramViewport,
  LinePlotViewport,
  PLOT_W,
  histogram,
} from "../src/viewports.js";
import {
  EP0_LEN,
  EP1_LEN,
  SCHEMA,
  installFakeServer,
  type FakeServer,
  type FakeServerOptions,
} from "./fake-server.js";

const cleanups: (() => void)[] = [];

afterEach(() => {
  while (cleanups.length) cleanups.pop()!();
  document.body.innerHTML = "";
});

async function mountApp(opts: FakeServerOptions = {}) {
  const fake = installFakeServer(opts);
  const root = document.createElement("div");
  document.body.appendChild(root);
  const app = new App(root, new Api(""), { pollMs: 0, projectionPollMs: 2 });
  cleanups.push(() => {
    app.stop();
    fake.restore();
  });
  await app.start();
  return { fake, root, app };
}

async function until(pred: () => boolean, ms = 3000): Promise<void> {
  const start = Date.now();
  while (!pred()) {
    if (Date.now() - start > ms) throw new Error("timed out waiting");
    await new Promise((r) => setTimeout(r, 5));
  }
}

/** Pin a fake layout on an SVG so click coordinates are meaningful. */
function stubRect(el: Element, left: number, width: number): void {
  (el as HTMLElement).getBoundingClientRect = () =>
    ({ left, width, top: 0, height: 120, right: left + width, bottom: 120,
       x: left, y: 0, toJSON: () => ({}) } as DOMRect);
}

/** Assert every view of the data agrees on (episode, t). */
function expectCoherent(root: HTMLElement, app: App, epId: number, t: number) {
  expect(app.store.get().episodeId).toBe(epId);
  expect(app.store.get().t).toBe(t);
  for (const v of app.viewports) expect(v.cursor).toBe(t);

  // the plots' cursor line sits at the x position for t
  const first = app.viewports[0] as LinePlotViewport;
  const n = first.series.length;
  const wantX = n < 2 ? PLOT_W / 2 : (t / (n - 1)) * PLOT_W;
  const line = first.el.querySelector("line.cursor")!;
  expect(Number(line.getAttribute("x1"))).toBeCloseTo(wantX, 6);

  // the image viewport shows exactly that frame of that episode
  const img = root.querySelector(".image-buffer img") as HTMLImageElement;
  expect(img.getAttribute("src")).toContain(`/api/episodes/${epId}/frames/${t}/image`);

  // the histogram covers the trailing window ending at t
  const histo = app.viewports.find((v) => v.kind === "histogram")!;
  expect(histo.el.querySelector(".caption")!.textContent).toContain(
    `ending t=${t}`,
  );

  // the projection highlights the matching point, and only it
  const active = root.querySelectorAll("circle.active");
  expect(active.length).toBe(1);
  expect(active[0].getAttribute("data-episode")).toBe(String(epId));
  expect(active[0].getAttribute("data-t")).toBe(String(t));

  // the scrubber reflects the same frame
  expect(app.panel.slider.value).toBe(String(t));
}

describe("dashboard cursor coherence", () => {
  it("slider, plot clicks, and projection clicks all drive one cursor", async () => {
    let ok = false;
    try {
      const { root, app } = await mountApp();
      await app.showProjection({});
      expect(root.querySelectorAll("circle.pt").length).toBe(EP0_LEN + EP1_LEN);

      // 1) dragging the frame slider
      app.panel.slider.value = "5";
      app.panel.slider.dispatchEvent(new Event("input", { bubbles: true }));
      expectCoherent(root, app, 0, 5);

      // 2) clicking inside a line plot jumps to the step under the pointer
      const svg = app.viewports[0].el.querySelector("svg")!;
      stubRect(svg, 100, 290);
      const clientX = 100 + (12 / (EP0_LEN - 1)) * 290;
      svg.dispatchEvent(new MouseEvent("click", { clientX, bubbles: true }));
      expectCoherent(root, app, 0, 12);

      // 3) clicking a projection point navigates to its (episode, t)
      const pt = root.querySelector<SVGCircleElement>(
        'circle[data-episode="0"][data-t="17"]',
      )!;
      pt.dispatchEvent(new MouseEvent("click", { bubbles: true }));
      await until(() => app.store.get().t === 17);
      expectCoherent(root, app, 0, 17);

      // and across episodes: the whole panel rebinds, cursor included
      const other = root.querySelector<SVGCircleElement>(
        'circle[data-episode="1"][data-t="7"]',
      )!;
      other.dispatchEvent(new MouseEvent("click", { bubbles: true }));
      await until(
        () => app.store.get().episodeId === 1 && app.store.get().t === 7,
      );
      expectCoherent(root, app, 1, 7);
      expect(app.panel.slider.max).toBe(String(EP1_LEN - 1));
      ok = true;
    } finally {
      process.stdout.write(
        `\n[ACCEPTANCE] dashboard-cursor-coherence: ${ok ? "PASS" : "FAIL"}\n`,
      );
    }
  });

  it("clamps out-of-range frames to the nearest bound", async () => {
    const { root, app } = await mountApp();
    await app.showProjection({});
    app.store.setActiveFrame(EP0_LEN + 10);
    expectCoherent(root, app, 0, EP0_LEN - 1);
    app.store.setActiveFrame(-4);
    expectCoherent(root, app, 0, 0);
  });

  it("builds one line plot per dimension, plus image and histogram", async () => {
    const { app } = await mountApp();
    const kinds = app.viewports.map((v) => v.kind);
    expect(kinds.filter((k) => k === "line-plot").length).toBe(5);
    expect(kinds.filter((k) => k === "image-buffer").length).toBe(1);
    expect(kinds.filter((k) => k === "histogram").length).toBe(1);
    // labels cover every state/action/reward component
    const labels = app.viewports
      .filter((v): v is LinePlotViewport => v.kind === "line-plot")
      .map((v) => v.label);
    expect(labels).toEqual([
      "state[0]",
      "state[1]",
      "state[2]",
      "action[0]",
      "reward[0]",
    ]);
    expect(countViewports(SCHEMA)).toBe(6);
  });

  it("keeps the current view when an unknown episode is requested", async () => {
    const { root, app } = await mountApp();
    await app.showProjection({});
    app.store.setActiveFrame(9);
    const before = app.viewports;

    app.panel.episodeInput.value = "999";
    const loadBtn = root.querySelector("button")!;
    loadBtn.dispatchEvent(new MouseEvent("click", { bubbles: true }));
    await until(() => !root.querySelector<HTMLElement>(".message")!.hidden);

    expect(root.querySelector(".message")!.textContent).toContain(
      "episode 999 not found",
    );
    expect(app.viewports).toBe(before); // nothing was torn down
    expectCoherent(root, app, 0, 9);
  });

  it("discards stale episode responses that finish after a newer one", async () => {
    const { fake, app } = await mountApp();
    const gate = fake.hold("/api/episodes/1");
    const slow = app.loadEpisode(1); // parked behind the gate
    await app.loadEpisode(0); // newer navigation completes first
    app.store.setActiveFrame(3);
    gate.release();
    await slow;
    expect(app.store.get().episodeId).toBe(0);
    expect(app.store.get().t).toBe(3);
  });
});

describe("projection workflow", () => {
  it("polls through computing responses, then reuses the cached result", async () => {
    const { fake, root, app } = await mountApp({ projection409s: 2 });
    await app.showProjection({});
    const calls = () => fake.requests.filter((r) => r.startsWith("/api/projection"));
    expect(calls().length).toBe(3); // two 409s, then the result
    expect(root.querySelectorAll("circle.pt").length).toBe(EP0_LEN + EP1_LEN);
    expect(root.querySelector<HTMLElement>(".progress")!.hidden).toBe(true);

    await app.showProjection({}); // identical request: no recompute wait
    expect(calls().length).toBe(4);
  });

  it("shows step details in the hover tooltip", async () => {
    const { root, app } = await mountApp();
    await app.showProjection({});
    const pt = root.querySelector<SVGCircleElement>(
      'circle[data-episode="0"][data-t="4"]',
    )!;
    pt.dispatchEvent(new MouseEvent("mouseenter", { bubbles: true }));
    const tip = root.querySelector<HTMLElement>(".tooltip")!;
    expect(tip.hidden).toBe(false);
    expect(tip.textContent).toContain("episode 0 · t 4");
    await until(() => tip.textContent!.includes("r="));
    pt.dispatchEvent(new MouseEvent("mouseleave", { bubbles: true }));
    expect(tip.hidden).toBe(true);
  });
});

describe("widget math", () => {
  it("maps click positions to the nearest timestep", () => {
    const plot = new LinePlotViewport("x", [0, 1, 2, 3, 4], () => {});
    const svg = plot.el.querySelector("svg")!;
    stubRect(svg, 0, 100);
    expect(plot.timeAtClientX(0)).toBe(0);
    expect(plot.timeAtClientX(50)).toBe(2);
    expect(plot.timeAtClientX(100)).toBe(4);
    stubRect(svg, 0, 0); // jsdom default layout: degrade to t=0, not NaN
    expect(plot.timeAtClientX(37)).toBe(0);
  });

  it("bins integer windows one bin per value", () => {
    expect(histogram([1, 1, 2, 4])).toEqual({
      counts: [2, 1, 0, 1],
      labels: ["1", "2", "3", "4"],
    });
  });

  it("bins continuous windows equal-width with max in the last bin", () => {
    expect(histogram([0, 0.5, 1], 2).counts).toEqual([1, 2]);
    expect(histogram([3.3, 3.3]).counts).toEqual([2]);
    expect(histogram([])).toEqual({ counts: [], labels: [] });
  });

  it("histogram window slides with the cursor and caps at 50 steps", () => {
    const series = Array.from({ length: 80 }, (_, i) => i);
    const histo = new HistogramViewport("a", series);
    expect(histo.windowAt(5)).toEqual([0, 1, 2, 3, 4, 5]);
    expect(histo.windowAt(70).length).toBe(HISTOGRAM_WINDOW);
    expect(histo.windowAt(70)[0]).toBe(70 - HISTOGRAM_WINDOW + 1);
  });
});
