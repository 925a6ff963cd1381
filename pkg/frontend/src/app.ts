/**
 * DOM wiring for the verification study.
 *
 * Flow: the verifier enters an id, items render one at a time (question,
 * environment, any helper functions the program calls, the program, and its
 * output), the timer runs from render to the judge click, judgments post
 * immediately, and a finished session downloads the server-stored JSONL.
 * Method identity stays blinded: labels ride along in requests but are never
 * rendered.
 */

import {
  envSegments,
  Judgment,
  JudgmentSender,
  SessionController,
  SessionItem,
} from "./client.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function renderEnvironment(container: HTMLElement, envText: string): void {
  container.textContent = "";
  for (const segment of envSegments(envText)) {
    if (segment.kind === "text") {
      const p = document.createElement("p");
      p.textContent = segment.text;
      container.appendChild(p);
    } else {
      const table = document.createElement("table");
      segment.rows.forEach((cells, rowIndex) => {
        const tr = document.createElement("tr");
        for (const cell of cells) {
          const td = document.createElement(rowIndex === 0 ? "th" : "td");
          td.textContent = cell;
          tr.appendChild(td);
        }
        table.appendChild(tr);
      });
      container.appendChild(table);
    }
  }
}

function renderItem(controller: SessionController): void {
  const item = controller.current;
  if (!item) return;
  const progress = controller.progress;
  el("progress").textContent = `Item ${progress.judged + 1} of ${progress.total}`;
  el("question").textContent = item.query;
  renderEnvironment(el("environment"), item.env_text);

  const functions = el("functions");
  functions.textContent = "";
  for (const fn of item.functions) {
    const pre = document.createElement("pre");
    pre.className = "code";
    pre.textContent = fn.source;
    functions.appendChild(pre);
  }
  el("solution").textContent = item.solution;
  el("output").textContent = item.answer === null ? "(no output)" : String(item.answer);
  controller.markRendered();
}

export async function startApp(fetchFn: typeof fetch = fetch.bind(window)): Promise<void> {
  const sender = new JudgmentSender(fetchFn);
  const startButton = el<HTMLButtonElement>("start");

  startButton.addEventListener("click", async () => {
    const verifierId = el<HTMLInputElement>("verifier-id").value.trim();
    if (!verifierId) return;
    const response = await fetchFn("/session");
    const session = (await response.json()) as { items: SessionItem[] };
    const controller = new SessionController(verifierId, session.items);

    el("entry-view").hidden = true;
    el("item-view").hidden = false;
    renderItem(controller);

    const submit = async (judgment: Judgment) => {
      await sender.submit(judgment); // duplicates resolve silently
    };

    const onJudge = async (correct: boolean) => {
      const judgment = controller.judge(correct);
      if (!judgment) return; // double click on the same item
      await submit(judgment);
      const hasMore = controller.advance();
      if (hasMore) {
        renderItem(controller);
      } else {
        el("item-view").hidden = true;
        el("done-view").hidden = false;
        const link = el<HTMLAnchorElement>("export-link");
        link.href = `/export/${encodeURIComponent(verifierId)}`;
        link.removeAttribute("aria-disabled");
      }
    };

    el<HTMLButtonElement>("judge-correct").addEventListener("click", () => void onJudge(true));
    el<HTMLButtonElement>("judge-incorrect").addEventListener("click", () => void onJudge(false));
  });
}
