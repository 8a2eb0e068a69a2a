/** Pure view-state logic: slice scrubbing, overlay toggling, the
 * both-ratings-required submit rule, unrated-case advancement, and the
 * summary table shape. Kept DOM-free so it is directly unit-testable. */

import type {
  CaseDetail,
  CaseSummary,
  RatingLevel,
  RatingSummary,
} from "./types.js";
import { RATING_LEVELS } from "./types.js";

export interface ViewerState {
  examId: string;
  nSlices: number;
  sliceIndex: number;
  overlayVisible: boolean;
  areaRating: RatingLevel | null;
  sliceRating: RatingLevel | null;
}

export function makeViewerState(detail: CaseDetail): ViewerState {
  return {
    examId: detail.exam_id,
    nSlices: detail.n_slices,
    sliceIndex: Math.floor(detail.n_slices / 2),
    overlayVisible: true,
    areaRating: detail.rating?.area_rating ?? null,
    sliceRating: detail.rating?.slice_rating ?? null,
  };
}

export function clampSlice(index: number, nSlices: number): number {
  return Math.min(Math.max(index, 0), nSlices - 1);
}

export function stepSlice(state: ViewerState, delta: number): ViewerState {
  return {
    ...state,
    sliceIndex: clampSlice(state.sliceIndex + delta, state.nSlices),
  };
}

export function toggleOverlay(state: ViewerState): ViewerState {
  return { ...state, overlayVisible: !state.overlayVisible };
}

export function setRating(
  state: ViewerState,
  kind: "area" | "slice",
  level: RatingLevel,
): ViewerState {
  return kind === "area"
    ? { ...state, areaRating: level }
    : { ...state, sliceRating: level };
}

/** Submit stays disabled until both ratings are chosen. */
export function canSubmit(state: ViewerState): boolean {
  return state.areaRating !== null && state.sliceRating !== null;
}

export function progressLabel(cases: CaseSummary[]): string {
  const rated = cases.filter((c) => c.rated).length;
  return `${rated}/${cases.length}`;
}

/** Next unrated case after `currentId` in list order, wrapping around, so a
 * full pass visits each unrated case exactly once. Returns null when all
 * cases are rated. */
export function nextUnrated(
  cases: CaseSummary[],
  currentId: string | null,
): string | null {
  if (cases.length === 0) return null;
  const start = currentId === null
    ? 0
    : cases.findIndex((c) => c.exam_id === currentId) + 1;
  for (let step = 0; step < cases.length; step++) {
    const c = cases[(start + step) % cases.length];
    if (!c.rated && c.exam_id !== currentId) return c.exam_id;
  }
  return null;
}

export interface SummaryRow {
  level: RatingLevel;
  area: string;
  slice: string;
}

function cell(count: number, pct: number | null): string {
  return pct === null ? "—" : `${count} (${pct})`;
}

/** Rows in the published table's shape: "level, n (%), n (%)". Dashes when
 * nothing has been rated yet. */
export function summaryRows(summary: RatingSummary): SummaryRow[] {
  return RATING_LEVELS.map((level) => ({
    level,
    area: cell(summary.area.counts[level], summary.area.percentages[level]),
    slice: cell(summary.slice.counts[level], summary.slice.percentages[level]),
  }));
}
