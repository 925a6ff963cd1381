import { describe, expect, it } from "vitest";

import {
  envSegments,
  Judgment,
  JudgmentSender,
  SessionController,
  SessionItem,
  toJsonl,
} from "./client.js";

function item(id: string): SessionItem {
  return {
    item_id: id,
    example_id: id.split(":")[0],
    method_label: "A",
    query: "What is 2 + 2?",
    env_text: "",
    solution: "ans = 2 + 2",
    functions: [],
    answer: 4,
  };
}

describe("toJsonl", () => {
  it("serializes one object per line with a trailing newline", () => {
    expect(toJsonl([{ a: 1 }, { b: 2 }])).toBe('{"a":1}\n{"b":2}\n');
    expect(toJsonl([])).toBe("");
  });
});

describe("envSegments", () => {
  it("parses markdown tables and skips the rule row", () => {
    const segments = envSegments("Table:\n| a | b |\n| --- | --- |\n| 1 | 2 |");
    expect(segments).toEqual([
      { kind: "text", text: "Table:" },
      { kind: "table", rows: [["a", "b"], ["1", "2"]] },
    ]);
  });

  it("keeps prose around tables", () => {
    const segments = envSegments("before\n| x |\n| --- |\n| 9 |\nafter");
    expect(segments.map((s) => s.kind)).toEqual(["text", "table", "text"]);
  });
});

function makeJudgment(): Judgment {
  return {
    verifier_id: "v1",
    example_id: "e1",
    method_label: "A",
    judged_correct: true,
    elapsed_ms: 1200,
  };
}

describe("JudgmentSender", () => {
  const instantSleep = () => Promise.resolve();

  it("resolves stored on 200", async () => {
    const sender = new JudgmentSender(
      async () => new Response("{}", { status: 200 }),
      "", 3, instantSleep,
    );
    expect(await sender.submit(makeJudgment())).toBe("stored");
  });

  it("resolves duplicate on 409 without retrying", async () => {
    let calls = 0;
    const sender = new JudgmentSender(
      async () => {
        calls += 1;
        return new Response("{}", { status: 409 });
      },
      "", 3, instantSleep,
    );
    expect(await sender.submit(makeJudgment())).toBe("duplicate");
    expect(calls).toBe(1);
  });

  it("retries network failures until success", async () => {
    let calls = 0;
    const sender = new JudgmentSender(
      async () => {
        calls += 1;
        if (calls < 3) throw new TypeError("network down");
        return new Response("{}", { status: 200 });
      },
      "", 5, instantSleep,
    );
    expect(await sender.submit(makeJudgment())).toBe("stored");
    expect(calls).toBe(3);
  });

  it("gives up after max attempts", async () => {
    const sender = new JudgmentSender(
      async () => {
        throw new TypeError("network down");
      },
      "", 2, instantSleep,
    );
    await expect(sender.submit(makeJudgment())).rejects.toThrow("not delivered");
  });
});

describe("SessionController", () => {
  it("measures render-to-click time with the injected clock", () => {
    let clock = 1000;
    const controller = new SessionController("v1", [item("e1:A")], () => clock);
    controller.markRendered();
    clock += 1234;
    const judgment = controller.judge(true);
    expect(judgment?.elapsed_ms).toBe(1234);
    expect(judgment?.elapsed_ms).toBeGreaterThan(0);
  });

  it("ignores a second click on the same item", () => {
    let clock = 0;
    const controller = new SessionController("v1", [item("e1:A")], () => clock);
    controller.markRendered();
    clock = 600;
    expect(controller.judge(true)).not.toBeNull();
    expect(controller.judge(false)).toBeNull();
    expect(controller.judgments).toHaveLength(1);
  });

  it("opens the export gate only after every item is judged", () => {
    let clock = 0;
    const items = [item("e1:A"), item("e2:A"), item("e3:A")];
    const controller = new SessionController("v1", items, () => clock);
    for (const _ of items) {
      expect(controller.complete).toBe(false);
      controller.markRendered();
      clock += 500;
      controller.judge(true);
      controller.advance();
    }
    expect(controller.complete).toBe(true);
    expect(controller.progress).toEqual({ judged: 3, total: 3 });
  });

  it("presents items in bundle order", () => {
    const items = [item("e2:A"), item("e1:A"), item("e3:A")];
    const controller = new SessionController("v1", items, () => 0);
    const seen: string[] = [];
    do {
      const current = controller.current;
      if (!current) break;
      seen.push(current.item_id);
      controller.markRendered();
      controller.judge(true);
    } while (controller.advance());
    expect(seen).toEqual(["e2:A", "e1:A", "e3:A"]);
  });
});
