/**
 * WebSocket progress subscription for a sampling job. The socket constructor
 * is injectable so the same code runs in the browser (global WebSocket) and
 * under node tests (the `ws` package).
 */

import { parseProgressMessage, ProgressMessage } from "./api.js";

export interface WebSocketLike {
  onmessage: ((ev: { data: unknown }) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  onclose: ((ev: unknown) => void) | null;
  close(): void;
}

export type WebSocketCtor = new (url: string) => WebSocketLike;

export interface JobProgress {
  fractions: number[];
  doneCount: number;
  stats: { masked_vertices: number; max_displacement: number } | null;
  error: string | null;
}

/**
 * Subscribe to a session's progress stream and resolve once the terminal
 * message for `jobId` arrives. Messages for other jobs are ignored. The
 * returned record keeps every fraction seen plus how many terminal
 * messages arrived (the server contract is exactly one).
 */
export function watchJob(
  url: string,
  jobId: string,
  wsCtor: WebSocketCtor,
  onUpdate?: (m: ProgressMessage) => void,
  timeoutMs = 120_000,
): Promise<JobProgress> {
  return new Promise((resolve, reject) => {
    const ws = new wsCtor(url);
    const record: JobProgress = { fractions: [], doneCount: 0, stats: null, error: null };
    const timer = setTimeout(() => {
      ws.close();
      reject(new Error(`no terminal message for job ${jobId} within ${timeoutMs}ms`));
    }, timeoutMs);

    ws.onmessage = (ev) => {
      let msg: ProgressMessage;
      try {
        msg = parseProgressMessage(
          typeof ev.data === "string" ? ev.data : new TextDecoder().decode(ev.data as ArrayBuffer),
        );
      } catch (err) {
        clearTimeout(timer);
        ws.close();
        reject(err);
        return;
      }
      if (msg.event.job_id !== jobId) return;
      onUpdate?.(msg);
      if (msg.kind === "progress") {
        record.fractions.push(msg.event.fraction_done);
      } else {
        record.doneCount += 1;
        record.stats = msg.event.stats;
        record.error = msg.event.error ?? null;
        clearTimeout(timer);
        // linger briefly so a (contract-violating) second terminal message
        // would be observed by the caller's onUpdate hook
        setTimeout(() => {
          ws.close();
          resolve(record);
        }, 50);
      }
    };
    ws.onerror = (err) => {
      clearTimeout(timer);
      reject(new Error(`progress socket error: ${String(err)}`));
    };
  });
}
