import { ApiClient, type ActionStep } from "./api.js";
import { keyToAction } from "./actions.js";
import {
  PAD,
  applyStep,
  createViewModel,
  exportScript,
  withError,
  withPending,
  type ViewModel,
} from "./viewmodel.js";

export interface AppOptions {
  sceneSeed?: number;
  contextFrames?: number;
  config?: Record<string, unknown>;
}

/** Interactive explorer: one session per page, keyboard-driven camera,
 * anchor/coverage panels refreshed after every step. */
export class App {
  vm: ViewModel;
  readonly client: ApiClient;
  private readonly els: {
    status: HTMLElement;
    error: HTMLElement;
    composite: HTMLImageElement;
    frameLabel: HTMLElement;
    holeLabel: HTMLElement;
    anchors: HTMLElement;
    coverageImg: HTMLImageElement;
    coverageList: HTMLElement;
    history: HTMLElement;
    repeat: HTMLSelectElement;
    exportOut: HTMLTextAreaElement;
  };
  private inflight: Promise<void> | null = null;
  private readonly onKeydown: (ev: KeyboardEvent) => void;

  constructor(
    readonly root: HTMLElement,
    client: ApiClient,
    sessionId: string,
    K: number,
  ) {
    this.client = client;
    this.vm = createViewModel(sessionId, K);
    root.innerHTML = `
      <header>
        <span id="session-label">session ${sessionId}</span>
        <span id="status"></span>
        <label>step size
          <select id="repeat">
            <option value="1">1</option>
            <option value="2">2</option>
            <option value="4">4</option>
            <option value="8">8</option>
          </select>
        </label>
      </header>
      <div id="error" hidden></div>
      <section id="viewport">
        <img id="composite" alt="current frame" />
        <div id="frame-label"></div>
        <div id="hole-label"></div>
      </section>
      <section>
        <h2>anchor slots</h2>
        <div id="anchors"></div>
      </section>
      <section>
        <h2>retrieval coverage</h2>
        <img id="coverage" alt="coverage overlay" />
        <ol id="coverage-list"></ol>
      </section>
      <section>
        <h2>history</h2>
        <pre id="history"></pre>
        <button id="export" type="button">export script</button>
        <textarea id="export-out" readonly></textarea>
      </section>
    `;
    const pick = <T extends Element>(sel: string): T => {
      const el = root.querySelector<T>(sel);
      if (el === null) throw new Error(`missing element ${sel}`);
      return el;
    };
    this.els = {
      status: pick<HTMLElement>("#status"),
      error: pick<HTMLElement>("#error"),
      composite: pick<HTMLImageElement>("#composite"),
      frameLabel: pick<HTMLElement>("#frame-label"),
      holeLabel: pick<HTMLElement>("#hole-label"),
      anchors: pick<HTMLElement>("#anchors"),
      coverageImg: pick<HTMLImageElement>("#coverage"),
      coverageList: pick<HTMLElement>("#coverage-list"),
      history: pick<HTMLElement>("#history"),
      repeat: pick<HTMLSelectElement>("#repeat"),
      exportOut: pick<HTMLTextAreaElement>("#export-out"),
    };
    pick<HTMLButtonElement>("#export").addEventListener("click", () => {
      this.els.exportOut.value = exportScript(this.vm);
    });
    this.onKeydown = (ev) => this.handleKey(ev);
    root.ownerDocument.addEventListener("keydown", this.onKeydown);
    this.render();
  }

  get repeat(): number {
    return Number(this.els.repeat.value);
  }

  private handleKey(ev: KeyboardEvent): void {
    if (this.vm.pending) return; // one request at a time; extra keys drop
    const step = keyToAction(ev.key, this.repeat);
    if (step === null) return;
    this.inflight = this.stepAndRender([step]);
  }

  /** Run one step round-trip. On failure the view-model keeps its last
   * good contents and only the error banner changes. */
  async stepAndRender(actions: ActionStep[]): Promise<void> {
    const before = this.vm;
    this.vm = withPending(before);
    this.render();
    try {
      const resp = await this.client.step(this.vm.sessionId, actions);
      this.vm = applyStep(before, actions, resp);
    } catch (err) {
      this.vm = withError(before, err instanceof Error ? err.message : String(err));
    }
    this.render();
  }

  /** Resolve once the current step (if any) has settled; tests use this. */
  async whenIdle(): Promise<void> {
    while (this.inflight !== null) {
      const current = this.inflight;
      await current;
      if (this.inflight === current) this.inflight = null;
    }
  }

  dispose(): void {
    this.root.ownerDocument.removeEventListener("keydown", this.onKeydown);
  }

  render(): void {
    const vm = this.vm;
    const doc = this.root.ownerDocument;
    this.els.status.textContent = vm.pending ? "stepping…" : "ready";
    this.els.error.hidden = vm.error === null;
    this.els.error.textContent = vm.error ?? "";
    if (vm.frameUrl !== null) {
      this.els.composite.src = this.client.resolve(vm.frameUrl);
    }
    this.els.frameLabel.textContent =
      vm.frameIndex === null ? "no frames yet" : `frame ${vm.frameIndex}`;
    this.els.holeLabel.textContent =
      vm.holeFraction === null ? "" : `holes ${(vm.holeFraction * 100).toFixed(2)}%`;

    this.els.anchors.replaceChildren();
    for (const panel of vm.anchors) {
      const fig = doc.createElement("figure");
      fig.className = panel.source === PAD ? "anchor-panel anchor-pad" : "anchor-panel";
      if (panel.source === PAD) {
        const block = doc.createElement("div");
        block.className = "pad-block";
        const badge = doc.createElement("span");
        badge.className = "pad-badge";
        badge.textContent = "PAD";
        block.appendChild(badge);
        fig.appendChild(block);
      } else {
        const img = doc.createElement("img");
        img.src = this.client.resolve(panel.url);
        img.alt = `anchor slot ${panel.slot}`;
        fig.appendChild(img);
      }
      const cap = doc.createElement("figcaption");
      cap.textContent =
        panel.source === PAD
          ? `slot ${panel.slot} · padded`
          : `slot ${panel.slot} · mem ${panel.source} · w=${panel.weight.toFixed(3)}`;
      fig.appendChild(cap);
      this.els.anchors.appendChild(fig);
    }

    const latest = vm.chunks[vm.chunks.length - 1];
    if (latest !== undefined && latest.coverageUrl !== "") {
      this.els.coverageImg.src = this.client.resolve(latest.coverageUrl);
    }
    this.els.coverageList.replaceChildren();
    for (const chunk of vm.chunks) {
      const li = doc.createElement("li");
      li.className = "chunk-row";
      const frac = doc.createElement("span");
      frac.className = "chunk-fraction";
      frac.textContent = chunk.coverageFraction.toFixed(6);
      li.append(
        `chunk ${chunk.ordinal}: picked [${chunk.selected.join(", ")}] ` +
          `(${chunk.termination}) coverage `,
        frac,
      );
      this.els.coverageList.appendChild(li);
    }

    this.els.history.textContent = exportScript(vm);
  }
}

/** Create a session against `baseUrl` and mount the explorer in `root`. */
export async function initApp(
  root: HTMLElement,
  baseUrl: string,
  opts: AppOptions = {},
): Promise<App> {
  const client = new ApiClient(baseUrl);
  const handle = await client.createSession({
    sceneSeed: opts.sceneSeed,
    contextFrames: opts.contextFrames,
    config: opts.config,
  });
  return new App(root, client, handle.id, handle.config.K);
}

declare global {
  interface Window {
    explorerApp?: App;
  }
}

/** Browser entry point: reads the API origin from ?api=... (defaults to the
 * page origin) and mounts into #app. Test environments call initApp directly. */
export async function bootFromDocument(): Promise<void> {
  const root = document.getElementById("app");
  if (root === null) return;
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? window.location.origin;
  const seed = params.get("scene");
  window.explorerApp = await initApp(root, base, {
    sceneSeed: seed !== null ? Number(seed) : undefined,
  });
}

if (typeof document !== "undefined" && document.getElementById("app") !== null) {
  bootFromDocument().catch((err: unknown) => {
    const root = document.getElementById("app");
    if (root !== null) {
      root.textContent = `failed to start: ${err instanceof Error ? err.message : String(err)}`;
    }
  });
}
