import * as fs from "node:fs";
import * as path from "node:path";
import initWabt from "wabt";

export const SCENARIOS = ["sqli", "ssti", "xsleak"] as const;
export type Scenario = (typeof SCENARIOS)[number];

/** Assemble one .wat source to wasm bytes. Throws on any parse error. */
export async function assemble(watPath: string): Promise<Uint8Array<ArrayBuffer>> {
  const wabt = await initWabt();
  const source = fs.readFileSync(watPath, "utf-8");
  const parsed = wabt.parseWat(path.basename(watPath), source);
  try {
    parsed.resolveNames();
    parsed.validate();
    const { buffer } = parsed.toBinary({
      log: false,
      write_debug_names: false,
    });
    return new Uint8Array(buffer);
  } finally {
    parsed.destroy();
  }
}

/** Assemble every scenario module from watDir into outDir. */
export async function buildAll(
  watDir: string,
  outDir: string,
): Promise<Map<Scenario, string>> {
  fs.mkdirSync(outDir, { recursive: true });
  const built = new Map<Scenario, string>();
  for (const scenario of SCENARIOS) {
    const bytes = await assemble(path.join(watDir, `${scenario}.wat`));
    if (!WebAssembly.validate(bytes)) {
      throw new Error(`${scenario}.wasm failed engine validation`);
    }
    const out = path.join(outDir, `${scenario}.wasm`);
    fs.writeFileSync(out, bytes);
    built.set(scenario, out);
  }
  return built;
}
