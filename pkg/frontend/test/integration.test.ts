/**
 * Live-service contract check. Runs only when NNVIZ_SERVICE_URL points at
 * a serving nnviz process, e.g.
 *
 *   nnviz serve --model model.ckpt --port 8321 &
 *   NNVIZ_SERVICE_URL=http://127.0.0.1:8321 npm test
 *
 * Everything else in the suite is hermetic.
 */

import { describe, expect, it } from "vitest";
import { makeApi, ServiceError } from "../src/api";
import { pollJob } from "../src/poll";

const base = process.env.NNVIZ_SERVICE_URL;
const liveIt = base ? it : it.skip;

function grayPgmBase64(side: number): string {
  const header = `P5\n${side} ${side}\n255\n`;
  const bytes = new Uint8Array(header.length + side * side);
  for (let i = 0; i < header.length; i++) {
    bytes[i] = header.charCodeAt(i);
  }
  for (let i = 0; i < side * side; i++) {
    bytes[header.length + i] = (i * 37) % 200;
  }
  let bin = "";
  for (const b of bytes) {
    bin += String.fromCharCode(b);
  }
  return btoa(bin);
}

describe("live service contract", () => {
  const api = makeApi(base ?? "");

  liveIt("serves a model card with classes", async () => {
    const card = await api.model();
    expect(card.class_names.length).toBeGreaterThan(0);
    expect(card.checkpoint_crc32).toMatch(/^[0-9a-f]{8}$/);
  });

  liveIt("predicts with sorted confidences", async () => {
    const card = await api.model();
    const pred = await api.predict(grayPgmBase64(32));
    expect(pred.topk.length).toBe(Math.min(5, card.class_names.length));
    const confs = pred.topk.map((t) => t.confidence);
    expect([...confs].sort((a, b) => b - a)).toEqual(confs);
    for (const c of pred.all) {
      expect(c).toBeGreaterThanOrEqual(0);
      expect(c).toBeLessThanOrEqual(1);
    }
  });

  liveIt("explains with a grid matching the input shape", async () => {
    const card = await api.model();
    const resp = await api.explain({
      image: grayPgmBase64(32),
      method: "gradcam",
      alpha: 0.5,
    });
    expect(resp.raw_grid.width).toBe(card.input_shape[2]);
    expect(resp.raw_grid.height).toBe(card.input_shape[1]);
    expect(resp.raw_grid.values.length).toBe(
      resp.raw_grid.width * resp.raw_grid.height,
    );
    expect(card.class_names).toContain(resp.meta.class);
  });

  liveIt("surfaces the error envelope for unknown classes", async () => {
    try {
      await api.explain({
        image: grayPgmBase64(32),
        method: "gradcam",
        class: "definitely-not-a-class",
      });
      expect.unreachable("service accepted an unknown class");
    } catch (err) {
      expect(err).toBeInstanceOf(ServiceError);
      expect((err as ServiceError).code).toBe("unknown_class");
    }
  });

  liveIt("runs an impression job to completion", async () => {
    const card = await api.model();
    const { job_id } = await api.submitImpression(card.class_names[0], {
      iterations: 3,
    });
    const record = await pollJob(api.job, job_id, { intervalMs: 200 });
    expect(record.status).toBe("done");
    expect(record.result?.logits.length).toBe(3);
  });
});
