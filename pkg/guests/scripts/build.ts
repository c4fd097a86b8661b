import * as fs from "node:fs";
import * as path from "node:path";
import { buildAll } from "../lib/assemble";

// npm run build executes with cwd at the package root
const root = process.cwd();

async function main(): Promise<void> {
  const built = await buildAll(path.join(root, "wat"), path.join(root, "build"));
  for (const [scenario, out] of built) {
    const size = fs.statSync(out).size;
    console.log(`${scenario.padEnd(8)} -> ${path.relative(root, out)} (${size} bytes)`);
  }
}

main().catch((err) => {
  console.error(err);
  process.exit(1);
});
