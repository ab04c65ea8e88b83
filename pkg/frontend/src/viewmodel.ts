import type { ActionStep, SegmentTrace, StepResponse } from "./api.js";
import { formatScript } from "./actions.js";

/** Slot source marker for padded anchor slots (no memory assigned). */
export const PAD = -1;

export interface AnchorPanel {
  slot: number;
  /** Memory id feeding this slot, or PAD when the slot is padding. */
  source: number;
  weight: number;
  /** Image path for the slot's rendered anchor (padded slots render flat). */
  url: string;
}

export interface ChunkView {
  ordinal: number;
  coverageFraction: number;
  coverageUrl: string;
  selected: number[];
  termination: string;
}

export interface ViewModel {
  sessionId: string;
  K: number;
  frameIndex: number | null;
  frameUrl: string | null;
  holeFraction: number | null;
  /** Always exactly K entries; unassigned slots carry source == PAD. */
  anchors: AnchorPanel[];
  chunks: ChunkView[];
  history: ActionStep[];
  generatedCount: number;
  pending: boolean;
  error: string | null;
}

export function createViewModel(sessionId: string, K: number): ViewModel {
  return {
    sessionId,
    K,
    frameIndex: null,
    frameUrl: null,
    holeFraction: null,
    anchors: [],
    chunks: [],
    history: [],
    generatedCount: 0,
    pending: false,
    error: null,
  };
}

export function withPending(vm: ViewModel): ViewModel {
  return { ...vm, pending: true, error: null };
}

/** A failed request must not disturb what is on screen: everything except
 * the error banner and the pending flag is carried over untouched. */
export function withError(vm: ViewModel, message: string): ViewModel {
  return { ...vm, pending: false, error: message };
}

function collectChunks(traces: SegmentTrace[], urls: string[], base: number): ChunkView[] {
  const out: ChunkView[] = [];
  for (const seg of traces) {
    for (const chunk of seg.chunks) {
      const ordinal = base + out.length;
      out.push({
        ordinal,
        coverageFraction: chunk.coverage_fraction,
        coverageUrl: urls[out.length] ?? "",
        selected: chunk.selected.slice(),
        termination: chunk.termination,
      });
    }
  }
  return out;
}

/** Fold a successful step response into the view-model: show the newest
 * frame, its K anchor slots (padding where the retriever came up short),
 * and append this step's chunk coverage entries and actions. */
export function applyStep(
  vm: ViewModel,
  actions: readonly ActionStep[],
  resp: StepResponse,
): ViewModel {
  const last = resp.frames[resp.frames.length - 1];
  const anchors: AnchorPanel[] = [];
  if (last !== undefined) {
    for (let slot = 0; slot < vm.K; slot++) {
      anchors.push({
        slot,
        source: slot < last.slot_sources.length ? last.slot_sources[slot] : PAD,
        weight: last.slot_weights[slot] ?? 0,
        url: last.anchors[slot] ?? "",
      });
    }
  }
  return {
    ...vm,
    frameIndex: last?.index ?? vm.frameIndex,
    frameUrl: last?.url ?? vm.frameUrl,
    holeFraction: last?.hole_fraction ?? vm.holeFraction,
    anchors: last !== undefined ? anchors : vm.anchors,
    chunks: vm.chunks.concat(
      collectChunks(resp.retrieval_trace, resp.coverage_urls, vm.chunks.length),
    ),
    history: vm.history.concat(actions),
    generatedCount: vm.generatedCount + resp.new_frame_indices.length,
    pending: false,
    error: null,
  };
}

/** History export matches the CLI script format exactly, so a browser
 * session can be replayed offline frame-for-frame. */
export function exportScript(vm: ViewModel): string {
  return formatScript(vm.history);
}
