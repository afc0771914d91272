from ccfusion.cli import main

raise SystemExit(main())
