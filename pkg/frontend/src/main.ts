/**
 * Browser bootstrap: wire the session machine and the pure renderer to the
 * DOM. The rater id lives only in memory for the lifetime of the page.
 */

import { RaterApiClient } from "./api.js";
import { renderView } from "./render.js";
import { RaterSession } from "./session.js";

function mount(root: HTMLElement): void {
  const params = new URLSearchParams(window.location.search);
  const baseUrl = params.get("server") ?? window.location.origin;

  root.innerHTML =
    '<section class="screen login">' +
    '<label for="rater-id">Rater id</label>' +
    '<input id="rater-id" type="text" autocomplete="off">' +
    '<button type="button" class="begin">Start rating</button>' +
    "</section>";

  const begin = root.querySelector<HTMLButtonElement>("button.begin");
  const field = root.querySelector<HTMLInputElement>("input#rater-id");
  if (begin === null || field === null) return;

  begin.addEventListener("click", () => {
    const raterId = field.value.trim();
    if (raterId === "") {
      field.focus();
      return;
    }
    const session = new RaterSession(new RaterApiClient(baseUrl), raterId);
    const redraw = (): void => {
      root.innerHTML = renderView(session.view());
    };

    root.addEventListener("click", (event) => {
      const target = event.target;
      if (!(target instanceof HTMLElement)) return;
      if (target.matches("button.choose")) {
        session.select(Number(target.dataset["index"]));
        redraw();
      } else if (target.matches("button.acknowledge")) {
        void session.acknowledgeTraining().then(redraw);
      } else if (target.matches("button.submit")) {
        redraw();
        void session.submitChoice().then(redraw);
      } else if (target.matches("button.retry")) {
        window.location.reload();
      }
    });

    void session.start().then(redraw);
    redraw();
  });
}

const root = document.getElementById("app");
if (root !== null) {
  mount(root);
}
