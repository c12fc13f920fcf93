/** DOM wiring for the tile-labeling gallery. */

import { ApiClient, StatusFilter } from "./api.js";
import { Card, GallerySnapshot, GalleryState } from "./state.js";

const api = new ApiClient("");
const state = new GalleryState(api);
let toastTimer: number | undefined;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function renderCard(card: Card, focused: boolean): HTMLElement {
  const wrap = el("div", "card" + (focused ? " focused" : ""));
  const img = el("img");
  img.src = card.imageUrl;
  img.alt = `${card.slide} tile (${card.x}, ${card.y})`;
  img.loading = "lazy";
  wrap.appendChild(img);
  const badge = el(
    "span",
    card.label === null ? "badge unlabeled" : `badge ${card.label}`,
    card.label === null ? "unlabeled" : card.label.replace("_", "-"),
  );
  wrap.appendChild(badge);
  wrap.appendChild(el("span", "addr", `${card.slide} (${card.x},${card.y})`));
  return wrap;
}

function render(snap: GallerySnapshot): void {
  const grid = document.getElementById("grid")!;
  grid.replaceChildren(
    ...snap.cards.map((card, i) => renderCard(card, i === snap.cursor)),
  );
  if (snap.cards.length === 0) {
    grid.replaceChildren(el("p", "empty", "No tiles match the current filter."));
  }

  document.getElementById("progress")!.textContent =
    `${snap.progress.labeled} / ${snap.progress.total} labeled`;
  document.getElementById("pager")!.textContent =
    `page ${snap.page + 1} of ${snap.totalPages} (${snap.totalTiles} tiles)`;

  const banner = document.getElementById("banner")!;
  banner.hidden = !snap.offline;

  const toast = document.getElementById("toast")!;
  if (snap.toast) {
    toast.textContent = snap.toast;
    toast.hidden = false;
    if (toastTimer !== undefined) window.clearTimeout(toastTimer);
    toastTimer = window.setTimeout(() => state.clearToast(), 4000);
  } else {
    toast.hidden = true;
  }

  const focused = grid.querySelector(".focused");
  if (focused) focused.scrollIntoView({ block: "nearest" });
}

function bindControls(): void {
  const status = document.getElementById("status-filter") as HTMLSelectElement;
  status.addEventListener("change", () => {
    void state.setFilters(status.value as StatusFilter, state.slideFilter);
  });
  document.getElementById("prev-page")!.addEventListener("click", () => {
    void state.setPage(state.page - 1);
  });
  document.getElementById("next-page")!.addEventListener("click", () => {
    void state.setPage(state.page + 1);
  });
  document.getElementById("retry")!.addEventListener("click", () => {
    void state.refresh();
  });
  document.addEventListener("keydown", (ev) => {
    if (ev.target instanceof HTMLSelectElement || ev.target instanceof HTMLInputElement) return;
    if (state.handleKey(ev.key)) ev.preventDefault();
  });
}

state.subscribe(render);
bindControls();

void state.refresh().then(async () => {
  const cohort = await api.getCohort().catch(() => null);
  if (cohort) {
    document.getElementById("title")!.textContent =
      `Tile labeling — ${cohort.patients.length} patients, ${cohort.n_tiles} tiles`;
  }
});
