/** DOM application: list screen with rated badges and progress, viewer with
 * scrubber/overlay/rating widgets, and the live summary table. All state
 * transitions go through the pure functions in state.ts; the service log is
 * the single source of truth for ratings. */

import { ApiClient } from "./api.js";
import { mapKey } from "./keyboard.js";
import {
  ViewerState,
  canSubmit,
  makeViewerState,
  nextUnrated,
  progressLabel,
  setRating,
  stepSlice,
  summaryRows,
  toggleOverlay,
} from "./state.js";
import type { CaseDetail, CaseSummary, RatingLevel } from "./types.js";
import { RATING_LEVELS } from "./types.js";

export class App {
  private cases: CaseSummary[] = [];
  private detail: CaseDetail | null = null;
  private viewer: ViewerState | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly root: HTMLElement,
  ) {}

  async start(): Promise<void> {
    document.addEventListener("keydown", (e) => this.onKey(e));
    await this.showList();
  }

  private async guard<T>(work: () => Promise<T>): Promise<T | null> {
    try {
      return await work();
    } catch (err) {
      this.renderError(err, () => void this.guard(work));
      return null;
    }
  }

  async showList(): Promise<void> {
    const cases = await this.guard(() => this.api.listCases());
    if (cases === null) return;
    this.cases = cases;
    this.detail = null;
    this.viewer = null;
    this.renderList();
    void this.refreshSummary();
  }

  async openCase(examId: string): Promise<void> {
    const detail = await this.guard(() => this.api.getCase(examId));
    if (detail === null) return;
    this.detail = detail;
    this.viewer = makeViewerState(detail);
    this.renderViewer();
    void this.refreshSummary();
  }

  async submit(): Promise<void> {
    const v = this.viewer;
    if (!v || !canSubmit(v)) return;
    const rating = {
      area_rating: v.areaRating as RatingLevel,
      slice_rating: v.sliceRating as RatingLevel,
    };
    // on failure keep local selections and offer retry
    const ok = await this.guard(() => this.api.submitRating(v.examId, rating));
    if (ok === null) return;
    const cases = await this.guard(() => this.api.listCases());
    if (cases === null) return;
    this.cases = cases;
    const next = nextUnrated(this.cases, v.examId);
    if (next === null) {
      await this.showList();
    } else {
      await this.openCase(next);
    }
  }

  private onKey(e: KeyboardEvent): void {
    if (!this.viewer) return;
    const action = mapKey(e);
    if (!action) return;
    e.preventDefault();
    switch (action.kind) {
      case "step":
        this.viewer = stepSlice(this.viewer, action.delta);
        break;
      case "toggle_overlay":
        this.viewer = toggleOverlay(this.viewer);
        break;
      case "rate":
        this.viewer = setRating(this.viewer, action.target, action.level);
        break;
      case "submit":
        void this.submit();
        return;
    }
    this.renderViewer();
  }

  // ------------------------------------------------------------------ render

  private renderError(err: unknown, retry: () => void): void {
    const banner = document.createElement("div");
    banner.className = "error-banner";
    banner.textContent = `service unreachable: ${String(err)} `;
    const btn = document.createElement("button");
    btn.textContent = "retry";
    btn.onclick = () => {
      banner.remove();
      retry();
    };
    banner.appendChild(btn);
    this.root.prepend(banner);
  }

  private renderList(): void {
    this.root.innerHTML = "";
    const h = document.createElement("h1");
    h.textContent = "Attention-map review";
    this.root.appendChild(h);

    const progress = document.createElement("p");
    progress.className = "progress";
    progress.textContent = `progress ${progressLabel(this.cases)}`;
    this.root.appendChild(progress);

    if (this.cases.length === 0) {
      const empty = document.createElement("p");
      empty.className = "empty";
      empty.textContent = "No case bundles available.";
      this.root.appendChild(empty);
    } else {
      const ul = document.createElement("ul");
      ul.className = "case-list";
      for (const c of this.cases) {
        const li = document.createElement("li");
        const a = document.createElement("a");
        a.href = "#";
        a.textContent = c.exam_id + (c.score != null ? `  (score ${c.score.toFixed(3)})` : "");
        a.onclick = (e) => {
          e.preventDefault();
          void this.openCase(c.exam_id);
        };
        li.appendChild(a);
        const badge = document.createElement("span");
        badge.className = c.rated ? "badge rated" : "badge unrated";
        badge.textContent = c.rated ? "rated" : "unrated";
        li.appendChild(badge);
        ul.appendChild(li);
      }
      this.root.appendChild(ul);
    }

    const summaryDiv = document.createElement("div");
    summaryDiv.id = "summary";
    this.root.appendChild(summaryDiv);
  }

  private renderViewer(): void {
    const v = this.viewer;
    const d = this.detail;
    if (!v || !d) return;
    this.root.innerHTML = "";

    const back = document.createElement("button");
    back.textContent = "← case list";
    back.onclick = () => void this.showList();
    this.root.appendChild(back);

    const h = document.createElement("h2");
    h.textContent = `${v.examId} — slice ${v.sliceIndex + 1}/${v.nSlices}`;
    this.root.appendChild(h);

    const img = document.createElement("img");
    img.className = "slice-image";
    img.src = (v.overlayVisible ? d.images.overlay : d.images.base)[v.sliceIndex];
    img.alt = `${v.overlayVisible ? "overlay" : "base"} slice ${v.sliceIndex}`;
    this.root.appendChild(img);

    const bar = this.renderSliceBar(d.slice_weights, v.sliceIndex);
    this.root.appendChild(bar);

    const scrub = document.createElement("input");
    scrub.type = "range";
    scrub.min = "0";
    scrub.max = String(v.nSlices - 1);
    scrub.value = String(v.sliceIndex);
    scrub.oninput = () => {
      this.viewer = { ...v, sliceIndex: Number(scrub.value) };
      this.renderViewer();
    };
    this.root.appendChild(scrub);

    const toggle = document.createElement("button");
    toggle.textContent = v.overlayVisible ? "hide overlay (O)" : "show overlay (O)";
    toggle.onclick = () => {
      this.viewer = toggleOverlay(v);
      this.renderViewer();
    };
    this.root.appendChild(toggle);

    this.root.appendChild(this.renderRatingWidget("area", v.areaRating, "1/2/3"));
    this.root.appendChild(
      this.renderRatingWidget("slice", v.sliceRating, "shift+1/2/3"),
    );

    const submit = document.createElement("button");
    submit.id = "submit";
    submit.textContent = "submit (Enter)";
    submit.disabled = !canSubmit(v);
    submit.onclick = () => void this.submit();
    this.root.appendChild(submit);
  }

  private renderRatingWidget(
    target: "area" | "slice",
    current: RatingLevel | null,
    hint: string,
  ): HTMLElement {
    const div = document.createElement("div");
    div.className = "rating-widget";
    const label = document.createElement("span");
    label.textContent = `${target} attention (${hint}): `;
    div.appendChild(label);
    for (const level of RATING_LEVELS) {
      const btn = document.createElement("button");
      btn.textContent = level;
      btn.className = level === current ? "level selected" : "level";
      btn.onclick = () => {
        if (this.viewer) {
          this.viewer = setRating(this.viewer, target, level);
          this.renderViewer();
        }
      };
      div.appendChild(btn);
    }
    return div;
  }

  private renderSliceBar(weights: number[], current: number): HTMLElement {
    const div = document.createElement("div");
    div.className = "slice-bar";
    const max = Math.max(...weights, 1e-12);
    weights.forEach((w, i) => {
      const col = document.createElement("span");
      col.className = i === current ? "bar current" : "bar";
      col.style.height = `${Math.round((w / max) * 40) + 2}px`;
      col.title = `slice ${i}: ${w.toFixed(4)}`;
      div.appendChild(col);
    });
    return div;
  }

  private async refreshSummary(): Promise<void> {
    const el = document.getElementById("summary");
    if (!el) return;
    try {
      const summary = await this.api.getSummary();
      el.innerHTML = "";
      const h = document.createElement("h3");
      h.textContent = `Ratings (${summary.total_rated} rated)`;
      el.appendChild(h);
      const table = document.createElement("table");
      const head = table.insertRow();
      for (const t of ["Rating", "Area attention (n, %)", "Slice attention (n, %)"]) {
        const th = document.createElement("th");
        th.textContent = t;
        head.appendChild(th);
      }
      for (const row of summaryRows(summary)) {
        const tr = table.insertRow();
        tr.insertCell().textContent = row.level;
        tr.insertCell().textContent = row.area;
        tr.insertCell().textContent = row.slice;
      }
      el.appendChild(table);
    } catch {
      /* summary is auxiliary: leave previous contents on failure */
    }
  }
}
