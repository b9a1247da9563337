/** Pure view-state model: every mutation returns a new state object, and
 * the whole state can be rebuilt from a session summary (refresh-safe). */

import type { Polarity, SessionSummary } from "./api.js";

export interface Marker {
  row: number;
  col: number;
  polarity: Polarity;
  /** true until the server acknowledged the click */
  pending: boolean;
}

export interface ViewState {
  sessionId: string;
  kind: "image" | "volume";
  depth: number;
  height: number;
  width: number;
  activeSlice: number;
  clickMode: Polarity;
  overlayOpacity: number;
  /** latest acknowledged mask version per slice */
  maskVersions: Record<number, number>;
  /** version whose bytes are currently painted, per slice */
  paintedVersions: Record<number, number>;
  markers: Record<number, Marker[]>;
  provenance: Record<number, number> | null;
}

export function initialState(sessionId: string, kind: "image" | "volume",
                             depth: number, height: number,
                             width: number): ViewState {
  return {
    sessionId, kind, depth, height, width,
    activeSlice: 0,
    clickMode: "positive",
    overlayOpacity: 0.45,
    maskVersions: {},
    paintedVersions: {},
    markers: {},
    provenance: null,
  };
}

/** Rebuild the annotation state from a session summary alone. */
export function fromSummary(summary: SessionSummary): ViewState {
  const state = initialState(summary.session_id, summary.kind, summary.depth,
                             summary.height, summary.width);
  state.activeSlice = summary.active_slice;
  for (const [k, v] of Object.entries(summary.mask_versions)) {
    state.maskVersions[Number(k)] = v;
  }
  for (const [k, clicks] of Object.entries(summary.clicks)) {
    state.markers[Number(k)] = clicks.map((c) => ({
      row: c.row, col: c.col,
      polarity: c.polarity as Polarity, pending: false,
    }));
  }
  if (summary.propagation) {
    state.provenance = {};
    for (const [k, seed] of Object.entries(summary.propagation.provenance)) {
      state.provenance[Number(k)] = seed;
    }
  }
  return state;
}

function cloned(state: ViewState): ViewState {
  return {
    ...state,
    maskVersions: { ...state.maskVersions },
    paintedVersions: { ...state.paintedVersions },
    markers: Object.fromEntries(Object.entries(state.markers)
      .map(([k, v]) => [k, v.slice()])),
    provenance: state.provenance ? { ...state.provenance } : null,
  };
}

export function withPendingMarker(state: ViewState, slice: number, row: number,
                                  col: number, polarity: Polarity): ViewState {
  const next = cloned(state);
  const list = next.markers[slice] ?? [];
  next.markers[slice] = [...list, { row, col, polarity, pending: true }];
  return next;
}

export function withClickAck(state: ViewState, slice: number,
                             version: number): ViewState {
  const next = cloned(state);
  const list = next.markers[slice] ?? [];
  const idx = list.findIndex((m) => m.pending);
  if (idx >= 0) list[idx] = { ...list[idx], pending: false };
  next.maskVersions[slice] = version;
  return next;
}

/** A rejected click never leaves a silent marker behind. */
export function withClickRejected(state: ViewState, slice: number): ViewState {
  const next = cloned(state);
  const list = next.markers[slice] ?? [];
  const idx = list.findIndex((m) => m.pending);
  if (idx >= 0) list.splice(idx, 1);
  return next;
}

export function withUndoAck(state: ViewState, slice: number,
                            version: number): ViewState {
  const next = cloned(state);
  const list = next.markers[slice] ?? [];
  // drop the last acknowledged marker
  for (let i = list.length - 1; i >= 0; i--) {
    if (!list[i].pending) {
      list.splice(i, 1);
      break;
    }
  }
  next.maskVersions[slice] = version;
  return next;
}

export function withPainted(state: ViewState, slice: number,
                            version: number): ViewState {
  const next = cloned(state);
  next.paintedVersions[slice] = version;
  return next;
}

export function withSlice(state: ViewState, slice: number): ViewState {
  const bounded = Math.max(0, Math.min(state.depth - 1, slice));
  return { ...cloned(state), activeSlice: bounded };
}

export function withMode(state: ViewState, mode: Polarity): ViewState {
  return { ...cloned(state), clickMode: mode };
}

export function withOpacity(state: ViewState, opacity: number): ViewState {
  return { ...cloned(state), overlayOpacity: Math.max(0, Math.min(1, opacity)) };
}

export function withPropagation(state: ViewState,
                                provenance: Record<string, number>,
                                versions: Record<number, number>): ViewState {
  const next = cloned(state);
  next.provenance = {};
  for (const [k, seed] of Object.entries(provenance)) {
    next.provenance[Number(k)] = seed;
  }
  next.maskVersions = { ...versions };
  return next;
}

export function undoAvailable(state: ViewState, slice: number): boolean {
  return (state.markers[slice] ?? []).some((m) => !m.pending);
}

/** Overlay is stale when the painted version lags the acknowledged one. */
export function overlayStale(state: ViewState, slice: number): boolean {
  if (!(slice in state.maskVersions)) return false;
  return state.paintedVersions[slice] !== state.maskVersions[slice];
}

export interface Badge {
  slice: number;
  seed: number;
}

export function badges(state: ViewState): Badge[] {
  if (!state.provenance) return [];
  return Object.entries(state.provenance)
    .map(([slice, seed]) => ({ slice: Number(slice), seed }))
    .sort((a, b) => a.slice - b.slice);
}
