/**
 * Session-flow logic for the verification app, kept free of DOM concerns so
 * it can be unit-tested with a scripted clock and a mocked transport.
 */

export interface SessionItem {
  item_id: string;
  example_id: string;
  method_label: string;
  query: string;
  env_text: string;
  solution: string;
  functions: { name: string; source: string }[];
  answer: unknown;
}

export interface Judgment {
  verifier_id: string;
  example_id: string;
  method_label: string;
  judged_correct: boolean;
  elapsed_ms: number;
}

export type SubmitResult = "stored" | "duplicate";

export function toJsonl(rows: unknown[]): string {
  return rows.map((row) => JSON.stringify(row)).join("\n") + (rows.length ? "\n" : "");
}

/**
 * Split an environment text into renderable segments: consecutive markdown
 * table lines become one table segment, everything else stays prose.
 */
export function envSegments(
  envText: string,
): ({ kind: "table"; rows: string[][] } | { kind: "text"; text: string })[] {
  const segments: ({ kind: "table"; rows: string[][] } | { kind: "text"; text: string })[] = [];
  let tableRows: string[][] = [];
  const flushTable = () => {
    if (tableRows.length) {
      segments.push({ kind: "table", rows: tableRows });
      tableRows = [];
    }
  };
  for (const line of envText.split("\n")) {
    const trimmed = line.trim();
    if (trimmed.startsWith("|") && trimmed.endsWith("|")) {
      const cells = trimmed
        .slice(1, -1)
        .split("|")
        .map((cell) => cell.trim());
      if (cells.every((cell) => /^-+$/.test(cell))) continue; // markdown rule row
      tableRows.push(cells);
    } else {
      flushTable();
      if (trimmed) segments.push({ kind: "text", text: trimmed });
    }
  }
  flushTable();
  return segments;
}

/**
 * Posts judgments with a retry queue: network failures are retried with
 * backoff, a 409 means the judgment already exists server-side.
 */
export class JudgmentSender {
  constructor(
    private fetchFn: typeof fetch,
    private baseUrl = "",
    private maxAttempts = 5,
    private sleep: (ms: number) => Promise<void> = (ms) =>
      new Promise((resolve) => setTimeout(resolve, ms)),
  ) {}

  async submit(judgment: Judgment): Promise<SubmitResult> {
    let lastError: unknown = null;
    for (let attempt = 0; attempt < this.maxAttempts; attempt++) {
      try {
        const response = await this.fetchFn(`${this.baseUrl}/judgment`, {
          method: "POST",
          headers: { "Content-Type": "application/json" },
          body: JSON.stringify(judgment),
        });
        if (response.status === 409) return "duplicate";
        if (response.ok) return "stored";
        throw new Error(`server answered ${response.status}`);
      } catch (error) {
        lastError = error;
        await this.sleep(100 * 2 ** attempt);
      }
    }
    throw new Error(`judgment not delivered after ${this.maxAttempts} attempts: ${lastError}`);
  }
}

/**
 * Drives one verifier through the session: items in bundle order, a timer
 * that runs from item render to judgment click, and an export gate that
 * opens only when every item is judged.
 */
export class SessionController {
  private index = 0;
  private renderedAt: number | null = null;
  private judged = new Set<string>();
  readonly judgments: Judgment[] = [];

  constructor(
    readonly verifierId: string,
    readonly items: SessionItem[],
    private now: () => number = () => performance.now(),
  ) {}

  get current(): SessionItem | null {
    return this.index < this.items.length ? this.items[this.index] : null;
  }

  get progress(): { judged: number; total: number } {
    return { judged: this.judged.size, total: this.items.length };
  }

  get complete(): boolean {
    return this.judged.size === this.items.length;
  }

  /** Call when the current item is on screen; starts its timer. */
  markRendered(): void {
    this.renderedAt = this.now();
  }

  /**
   * Record the verifier's click. Returns the judgment to send, or null for
   * a repeated click on an already-judged item.
   */
  judge(correct: boolean): Judgment | null {
    const item = this.current;
    if (!item || this.renderedAt === null) return null;
    if (this.judged.has(item.item_id)) return null;
    const elapsed = Math.max(1, Math.round(this.now() - this.renderedAt));
    const judgment: Judgment = {
      verifier_id: this.verifierId,
      example_id: item.example_id,
      method_label: item.method_label,
      judged_correct: correct,
      elapsed_ms: elapsed,
    };
    this.judged.add(item.item_id);
    this.judgments.push(judgment);
    return judgment;
  }

  /** Move to the next unjudged item; returns false at the end. */
  advance(): boolean {
    if (this.index < this.items.length) {
      this.index += 1;
      this.renderedAt = null;
    }
    return this.index < this.items.length;
  }
}
