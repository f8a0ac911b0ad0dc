from tissuescan.cli import main

raise SystemExit(main())
