/**
 * Pure view rendering: session view in, HTML string out.
 *
 * Nothing here touches the network or the DOM, so every screen can be
 * snapshot-tested. Candidate lists are rendered in payload order, and the
 * evaluation screen gives every candidate identical markup; only training
 * items mark the known-correct caption.
 */

import { SessionView } from "./session.js";
import { PresentedCandidate } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

function candidateRow(candidate: PresentedCandidate, selected: boolean, emphasized: boolean): string {
  const classes = ["candidate"];
  if (selected) classes.push("selected");
  if (emphasized) classes.push("ground-truth");
  const marker = emphasized ? '<span class="truth-marker">correct caption</span>' : "";
  return (
    `<li class="${classes.join(" ")}" data-index="${candidate.index}">` +
    `<button type="button" class="choose" data-index="${candidate.index}">` +
    `${escapeHtml(candidate.text)}</button>${marker}</li>`
  );
}

export function renderView(view: SessionView): string {
  switch (view.kind) {
    case "loading":
      return '<section class="screen loading"><p>Loading&hellip;</p></section>';
    case "training": {
      const item = view.item;
      const rows = item.candidates
        .map((c) => candidateRow(c, false, c.index === item.ground_truth_index))
        .join("");
      return (
        '<section class="screen training">' +
        `<p class="progress">Training example ${view.position + 1} of ${view.total}</p>` +
        `<p class="instruction">${escapeHtml(item.instruction)}</p>` +
        `<img class="subject" src="${escapeHtml(item.image_url)}" alt="training image">` +
        `<ol class="candidates">${rows}</ol>` +
        '<button type="button" class="acknowledge">Got it, next</button>' +
        "</section>"
      );
    }
    case "rating": {
      const inst = view.instance;
      const rows = inst.candidates
        .map((c) => candidateRow(c, c.index === view.selection, false))
        .join("");
      const submitAttrs = view.selection === null || view.posting ? " disabled" : "";
      const error = view.error === null ? "" : `<p class="error">${escapeHtml(view.error)}</p>`;
      return (
        '<section class="screen rating">' +
        '<p class="prompt">Pick the caption that best describes the image.</p>' +
        `<img class="subject" src="${escapeHtml(inst.image_url)}" alt="image to caption">` +
        `<ol class="candidates">${rows}</ol>` +
        error +
        `<button type="button" class="submit"${submitAttrs}>Submit</button>` +
        "</section>"
      );
    }
    case "done":
      return (
        '<section class="screen done">' +
        "<p>No more tasks. Thanks for rating!</p>" +
        "</section>"
      );
    case "fatal":
      return (
        '<section class="screen fatal">' +
        `<p class="error">${escapeHtml(view.message)}</p>` +
        '<button type="button" class="retry">Reload</button>' +
        "</section>"
      );
  }
}
