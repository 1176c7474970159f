/**
 * Poll an impression job until it reaches a terminal state. Resolves with
 * the done record, rejects with the failure reason, and maps a 404 on a
 * previously seen job to a friendly TTL-expiry message.
 */

import { JobRecord, ServiceError } from "./api";

export interface PollOptions {
  intervalMs?: number;
  maxAttempts?: number;
  onUpdate?: (record: JobRecord) => void;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export async function pollJob(
  getJob: (id: string) => Promise<JobRecord>,
  id: string,
  opts: PollOptions = {},
): Promise<JobRecord> {
  const interval = opts.intervalMs ?? 500;
  const maxAttempts = opts.maxAttempts ?? 600;
  const sleep = opts.sleep ?? defaultSleep;
  let seen = false;
  for (let attempt = 0; attempt < maxAttempts; attempt++) {
    let record: JobRecord;
    try {
      record = await getJob(id);
    } catch (err) {
      if (err instanceof ServiceError && err.status === 404 && seen) {
        throw new Error("job results expired (kept only for the server TTL)");
      }
      throw err;
    }
    seen = true;
    opts.onUpdate?.(record);
    if (record.status === "done") {
      return record;
    }
    if (record.status === "failed") {
      throw new Error(record.error ?? "impression job failed");
    }
    await sleep(interval);
  }
  throw new Error("gave up polling the impression job");
}
